//! Build a small substrate from JSON, then evaluate the energy and its
//! derivatives at a random state.

use thermoprop::substrate::{StateVector, SubstrateConfig};

const SPEC: &str = r#"{
  "partition": {"input_dim": 3, "hidden_dim": 3, "output_dim": 2, "module_sizes": [4, 4]},
  "base": {"a": 1.0, "b0": {"seed": 3, "std": 0.5, "blocks": ["hidden", "output"]}, "kappa": 0.1},
  "couplings": [{"m": 0, "mp": 1, "k": 2, "seed": 11, "gain": 3.0}],
  "rescale": true
}"#;

fn main() -> thermoprop::error::Result<()> {
    let cfg: SubstrateConfig = serde_json::from_str(SPEC)?;
    let spec = cfg.build()?;
    let st = spec.stiffness();
    println!(
        "D = {}, |theta| = {}, lambda_min = {:.4} (before rescale {:.4}, factor {:.4})",
        spec.dim(),
        spec.num_params(),
        st.lambda_min,
        st.lambda_min_before_rescale,
        st.coupling_rescale
    );

    let x = StateVector::from_slice(&[0.3, -0.2, 0.5, 0.1, -0.4, 0.2, 0.7, -0.1])?;
    println!("E(x)          = {:.6}", spec.energy(&x)?);
    println!("|grad_x E|    = {:.6}", spec.grad_x(&x)?.norm());
    println!("|grad_theta E| = {:.6}", spec.grad_theta(&x)?.norm());
    let h = spec.hessian_free(&x)?;
    println!("free Hessian eigenvalues: {:.4?}", h.symmetric_eigenvalues().as_slice());
    let m = spec.mixed_second(&x)?;
    println!("mixed second derivative: {} x {}", m.nrows(), m.ncols());
    println!("third x-derivative diagonal: {:.4?}", spec.third_x_diagonal(&x, 1e-4)?.as_slice());
    Ok(())
}
