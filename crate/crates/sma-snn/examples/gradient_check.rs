//! Finite-difference verification of the reverse-mode gradients.
//!
//! Builds a small network mixing convolution, batch-norm style affine
//! transforms, pooling and softmax, then compares every analytic gradient
//! against central differences.
//!
//!     cargo run --example gradient_check

use sma_snn::gradcheck::{check_gradients, CheckCfg};
use sma_snn::rng::{derive, tag};
use sma_snn::tensor::Tensor;
use sma_snn::Result;
use rand::Rng;

fn main() -> Result<()> {
    let mut rng = derive(42, &[tag("example")]);
    let rand = |dims: &[usize], rng: &mut sma_snn::rng::SeededRng| {
        let data: Vec<f64> = (0..dims.iter().product::<usize>())
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect();
        Tensor::from_vec(dims, data).unwrap()
    };

    // x [2,3,5,5] conv k [4,3,3,3] -> relu -> global pool -> softmax -> pick
    let inputs = vec![
        rand(&[2, 3, 5, 5], &mut rng),
        rand(&[4, 3, 3, 3], &mut rng),
        rand(&[4], &mut rng),
    ];
    let outcome = check_gradients(
        |g, vals| {
            let (x, k, b) = (vals[0], vals[1], vals[2]);
            let y = g.conv2d(x, k, Some(b), 1, 1)?;
            let y = g.relu(y);
            let y = g.avg_pool_global(y)?;
            let y = g.reshape(y, &[2, 4])?;
            let p = g.log_softmax(y, 1)?;
            g.mean_all(p)
        },
        &inputs,
        CheckCfg::default(),
        &mut rng,
    )?;

    println!(
        "checked {} coordinates, max relative error {:.3e}",
        outcome.coords_checked, outcome.max_rel_err
    );
    for v in &outcome.violations {
        println!(
            "  input {} coord {}: analytic {:+.6e} vs numeric {:+.6e}",
            v.input, v.coord, v.analytic, v.numeric
        );
    }
    assert!(outcome.ok(), "gradient check failed");
    println!("all gradients agree with central differences");
    Ok(())
}
