fn main() -> std::process::ExitCode {
    thermoprop::cli::main()
}
