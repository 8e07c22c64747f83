//! How the temperature controls sparsity: the output always sums to τ, and a
//! larger τ never removes a concept from the support.

use fcbm::sparsemax::{sparsemax_forward, sparsemax_jvp, sparsemax_tau_grad};

fn main() -> fcbm::Result<()> {
    let scores = [2.0, 1.5, 0.9, 0.3, -0.4, -1.0];
    println!("scores {scores:?}\n");
    println!("{:>6}  {:>3}  {:>8}  output", "tau", "k", "xi");
    for tau in [0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0] {
        let r = sparsemax_forward(&scores, tau)?;
        let out: Vec<String> = r.output.iter().map(|x| format!("{x:.3}")).collect();
        println!("{tau:>6.2}  {:>3}  {:>8.4}  [{}]", r.k(), r.threshold, out.join(", "));
    }

    let r = sparsemax_forward(&[2.0, 1.5, 0.0], 1.0)?;
    let v = [1.0, 0.0, 0.0];
    println!("\nJacobian-vector product at s = [2, 1.5, 0], tau = 1, v = e1:");
    println!("  {:?}", sparsemax_jvp(&r, &v)?);
    println!("d<u, sparsemax>/d tau for u = [1, 2, 3]: {}", sparsemax_tau_grad(&r, &[1.0, 2.0, 3.0])?);
    Ok(())
}
