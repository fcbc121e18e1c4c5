//! Residual injection, reparameterized sampling and ELBO gradients checked against finite differences.

use splat_closure::variational::{elbo_gradients, elbo_terms, inject_residual, reparameterize, sample_eps, FeatureMatrix, DEFAULT_ALPHA};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let features = FeatureMatrix::from_fn(4, 3, |i, j| (i as f64 - j as f64) * 0.3);
    let residual = FeatureMatrix::from_element(4, 3, 0.5);
    let injected = inject_residual(&features, &residual, DEFAULT_ALPHA)?;

    let mu = FeatureMatrix::from_element(4, 3, 0.2);
    let sigma = FeatureMatrix::from_element(4, 3, 0.8);
    let reconstruction = reparameterize(&mu, &sigma, &sample_eps(4, 3, 11))?;

    let t = elbo_terms(&injected, &reconstruction, &mu, &sigma)?;
    println!("recon {:.5}  kl {:.5}  loss {:.5}", t.recon, t.kl, t.loss);

    let g = elbo_gradients(&injected, &reconstruction, &mu, &sigma)?;
    let h = 1e-6;
    let mut bumped = sigma.clone();
    bumped[(0, 0)] += h;
    let numeric = (elbo_terms(&injected, &reconstruction, &mu, &bumped)?.loss - t.loss) / h;
    println!("d loss / d sigma[0,0]: analytic {:.6}  numeric {:.6}", g.d_sigma[(0, 0)], numeric);
    Ok(())
}
