//! Conditional VAE over flattened hotspot heatmaps, conditioned on the
//! refined contact feature.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{BotError, Result};
use crate::nn::Linear;
use crate::params::ParameterStore;
use crate::tensor::Tensor;

pub const LOG_VAR_MIN: f64 = -10.0;
pub const LOG_VAR_MAX: f64 = 10.0;
pub const DEFAULT_LAMBDA: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CvaeConfig {
    pub input_dim: usize,
    pub cond_dim: usize,
    pub hidden: usize,
    pub latent: usize,
}

impl CvaeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.cond_dim == 0 || self.hidden == 0 || self.latent == 0 {
            return Err(BotError::Config(format!("C-VAE dims must be positive: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LatentParams {
    pub mu: Var,
    pub log_var: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct CvaeOutput {
    /// `1 x input_dim`, nonnegative.
    pub gamma_hat: Var,
    pub latent: LatentParams,
}

#[derive(Debug, Clone, Copy)]
pub struct CvaeLoss {
    pub recon: Var,
    pub kl: Var,
    pub total: Var,
}

#[derive(Debug, Clone)]
pub struct Cvae {
    pub cfg: CvaeConfig,
    enc1: Linear,
    enc2: Linear,
    dec1: Linear,
    dec2: Linear,
}

impl Cvae {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParameterStore,
        rng: &mut R,
        name: &str,
        cfg: CvaeConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            enc1: Linear::new(store, rng, &format!("{name}.enc1"), cfg.input_dim + cfg.cond_dim, cfg.hidden, true)?,
            enc2: Linear::new(store, rng, &format!("{name}.enc2"), cfg.hidden, 2 * cfg.latent, true)?,
            dec1: Linear::new(store, rng, &format!("{name}.dec1"), cfg.latent + cfg.cond_dim, cfg.hidden, true)?,
            dec2: Linear::new(store, rng, &format!("{name}.dec2"), cfg.hidden, cfg.input_dim, true)?,
            cfg,
        })
    }

    /// Every argument is `rows x dim` with the same row count; rows are independent samples.
    fn check(&self, t: &Tape, v: Var, dim: usize, rows: usize, what: &str) -> Result<()> {
        if t.shape(v) != [rows, dim] {
            return Err(BotError::Shape(format!(
                "C-VAE {what} must be [{rows}, {dim}], got {:?}",
                t.shape(v)
            )));
        }
        Ok(())
    }

    pub fn encode(&self, t: &mut Tape, gamma: Var, cond: Var) -> Result<LatentParams> {
        let rows = t.value(cond).rows();
        self.check(t, gamma, self.cfg.input_dim, rows, "input")?;
        self.check(t, cond, self.cfg.cond_dim, rows, "condition")?;
        let x = t.concat_cols(&[gamma, cond])?;
        let h = self.enc1.forward(t, x)?;
        let h = t.gelu(h);
        let out = self.enc2.forward(t, h)?;
        let mu = t.slice_cols(out, 0, self.cfg.latent)?;
        let lv = t.slice_cols(out, self.cfg.latent, self.cfg.latent)?;
        let log_var = t.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
        Ok(LatentParams { mu, log_var })
    }

    pub fn decode(&self, t: &mut Tape, z: Var, cond: Var) -> Result<Var> {
        let rows = t.value(cond).rows();
        self.check(t, z, self.cfg.latent, rows, "latent")?;
        self.check(t, cond, self.cfg.cond_dim, rows, "condition")?;
        let x = t.concat_cols(&[z, cond])?;
        let h = self.dec1.forward(t, x)?;
        let h = t.gelu(h);
        let out = self.dec2.forward(t, h)?;
        Ok(t.softplus(out))
    }

    /// Encode, reparameterize with the supplied standard-normal `eps`, decode.
    pub fn forward(&self, t: &mut Tape, gamma: Var, cond: Var, eps: Tensor) -> Result<CvaeOutput> {
        let latent = self.encode(t, gamma, cond)?;
        let rows = t.value(cond).rows();
        if eps.len() != rows * self.cfg.latent {
            return Err(BotError::Shape(format!(
                "eps has {} values, need {rows} x {}",
                eps.len(),
                self.cfg.latent
            )));
        }
        let eps = t.constant(eps.reshape(&[rows, self.cfg.latent])?);
        let half = t.scale(latent.log_var, 0.5);
        let std = t.exp(half);
        let noise = t.mul(std, eps)?;
        let z = t.add(latent.mu, noise)?;
        let gamma_hat = self.decode(t, z, cond)?;
        Ok(CvaeOutput { gamma_hat, latent })
    }

    /// Decode from a prior draw `z ~ N(0, I)`.
    pub fn infer(&self, t: &mut Tape, cond: Var, z: Tensor) -> Result<Var> {
        let rows = t.value(cond).rows();
        let z = t.constant(z.reshape(&[rows, self.cfg.latent])?);
        self.decode(t, z, cond)
    }

    pub fn sample_eps<R: Rng + ?Sized>(&self, rng: &mut R) -> Tensor {
        sample_standard_normal(rng, self.cfg.latent)
    }
}

pub fn sample_standard_normal<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Tensor {
    Tensor::from_fn(&[1, n], |_| rng.sample::<f64, _>(StandardNormal))
}

/// `z = mu + std * eps`, elementwise.
pub fn reparameterize(mu: &[f64], std: &[f64], eps: &[f64]) -> Vec<f64> {
    mu.iter().zip(std).zip(eps).map(|((m, s), e)| m + s * e).collect()
}

/// Closed-form `KL(N(mu, exp(log_var)) || N(0, 1))`, summed over dimensions.
pub fn kl_divergence(mu: &[f64], log_var: &[f64]) -> f64 {
    0.5 * mu
        .iter()
        .zip(log_var)
        .map(|(m, lv)| m * m + lv.exp() - lv - 1.0)
        .sum::<f64>()
}

/// `L_recon` (masked mean squared error), `L_kl` and `L_o = L_recon + lambda * L_kl`.
/// For a batch of rows, `L_kl` is summed over rows and `L_recon` averages every scored cell.
/// `mask` holds 1 for scored cells and 0 elsewhere; `None` scores every cell.
pub fn cvae_loss(
    t: &mut Tape,
    gamma: Var,
    gamma_hat: Var,
    latent: &LatentParams,
    lambda: f64,
    mask: Option<&Tensor>,
) -> Result<CvaeLoss> {
    let diff = t.sub(gamma_hat, gamma)?;
    let recon = match mask {
        Some(m) => {
            let count = m.sum();
            if count <= 0.0 {
                return Err(BotError::Empty("reconstruction mask selects no cells".into()));
            }
            let mv = t.constant(m.clone().reshape(t.shape(diff))?);
            let masked = t.mul(diff, mv)?;
            let sq = t.square(masked);
            let s = t.sum(sq);
            t.scale(s, 1.0 / count)
        }
        None => {
            let sq = t.square(diff);
            t.mean(sq)
        }
    };
    let mu2 = t.square(latent.mu);
    let var = t.exp(latent.log_var);
    let a = t.add(mu2, var)?;
    let b = t.sub(a, latent.log_var)?;
    let s = t.sum(b);
    let n = t.value(latent.mu).len() as f64;
    let half = t.scale(s, 0.5);
    let ones = t.constant(Tensor::full(&[1], -0.5 * n));
    let kl = t.add(half, ones)?;
    let weighted = t.scale(kl, lambda);
    let total = t.add(recon, weighted)?;
    for (what, v) in [("L_recon", recon), ("L_kl", kl)] {
        if !t.scalar(v).is_finite() {
            return Err(BotError::NonFinite(what.into()));
        }
    }
    Ok(CvaeLoss { recon, kl, total })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check, GradCheckOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny(store: &mut ParameterStore, seed: u64) -> Cvae {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = CvaeConfig {
            input_dim: 12,
            cond_dim: 5,
            hidden: 7,
            latent: 3,
        };
        Cvae::new(store, &mut rng, "cvae", cfg).unwrap()
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.0; 4], &[0.0; 4]), 0.0);
        assert!((kl_divergence(&[1.0; 3], &[0.0; 3]) - 1.5).abs() < 1e-15);
        assert!(kl_divergence(&[0.3, -0.2], &[0.5, -1.0]) > 0.0);
    }

    #[test]
    fn zero_std_gives_mean() {
        let z = reparameterize(&[0.5, -2.0], &[0.0, 0.0], &[1.3, -0.7]);
        assert_eq!(z, vec![0.5, -2.0]);
    }

    #[test]
    fn clamped_log_var_bounds_noise() {
        let mut store = ParameterStore::new();
        let cvae = tiny(&mut store, 1);
        store.set("cvae.enc2.w", Tensor::zeros(&[7, 6])).unwrap();
        store
            .set("cvae.enc2.b", Tensor::new(&[6], vec![0.2, -0.1, 0.4, -1e6, -1e6, -1e6]).unwrap())
            .unwrap();
        let mut t = Tape::new(&store);
        let g = t.constant(Tensor::full(&[1, 12], 0.1));
        let c = t.constant(Tensor::full(&[1, 5], 0.3));
        let lat = cvae.encode(&mut t, g, c).unwrap();
        assert_eq!(t.value(lat.log_var).data(), &[LOG_VAR_MIN; 3]);
        let std = (0.5 * LOG_VAR_MIN).exp();
        assert!(std < 7e-3);
    }

    #[test]
    fn shapes_and_determinism() {
        let mut store = ParameterStore::new();
        let cvae = tiny(&mut store, 2);
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(11);
            let mut t = Tape::new(&store);
            let g = t.constant(Tensor::full(&[1, 12], 0.1));
            let c = t.constant(Tensor::full(&[1, 5], 0.3));
            let out = cvae.forward(&mut t, g, c, cvae.sample_eps(&mut rng)).unwrap();
            assert_eq!(t.shape(out.gamma_hat), &[1, 12]);
            assert!(t.value(out.gamma_hat).data().iter().all(|&v| v >= 0.0));
            t.value(out.gamma_hat).clone()
        };
        assert_eq!(run(), run());

        let mut t = Tape::new(&store);
        let g = t.constant(Tensor::full(&[1, 11], 0.1));
        let c = t.constant(Tensor::full(&[1, 5], 0.3));
        assert!(cvae.encode(&mut t, g, c).is_err());
    }

    #[test]
    fn batched_rows_match_single_rows() {
        let mut store = ParameterStore::new();
        let cvae = tiny(&mut store, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = Tensor::from_fn(&[3, 12], |i| (i as f64 * 0.37).sin().abs());
        let c = Tensor::from_fn(&[3, 5], |i| (i as f64 * 0.11).cos());
        let eps = sample_standard_normal(&mut rng, 9).reshape(&[3, 3]).unwrap();
        let mut t = Tape::new(&store);
        let (gv, cv) = (t.constant(g.clone()), t.constant(c.clone()));
        let out = cvae.forward(&mut t, gv, cv, eps.clone()).unwrap();
        let batched = t.value(out.gamma_hat).clone();
        for r in 0..3 {
            let row = |x: &Tensor, n: usize| Tensor::new(&[1, n], x.data()[r * n..(r + 1) * n].to_vec()).unwrap();
            let mut t = Tape::new(&store);
            let (gv, cv) = (t.constant(row(&g, 12)), t.constant(row(&c, 5)));
            let out = cvae.forward(&mut t, gv, cv, row(&eps, 3)).unwrap();
            for (a, b) in t.value(out.gamma_hat).data().iter().zip(&batched.data()[r * 12..(r + 1) * 12]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn loss_examples() {
        let store = ParameterStore::new();
        let mut t = Tape::new(&store);
        let g = t.constant(Tensor::full(&[1, 4], 0.5));
        let mu = t.constant(Tensor::zeros(&[1, 3]));
        let lv = t.constant(Tensor::zeros(&[1, 3]));
        let lat = LatentParams { mu, log_var: lv };
        let l = cvae_loss(&mut t, g, g, &lat, 0.01, None).unwrap();
        assert_eq!(t.scalar(l.recon), 0.0);
        assert_eq!(t.scalar(l.kl), 0.0);
        assert_eq!(t.scalar(l.total), 0.0);

        let mu1 = t.constant(Tensor::full(&[1, 3], 1.0));
        let lat = LatentParams { mu: mu1, log_var: lv };
        let l = cvae_loss(&mut t, g, g, &lat, 0.01, None).unwrap();
        assert!((t.scalar(l.kl) - 1.5).abs() < 1e-15);
        assert!((t.scalar(l.total) - 0.015).abs() < 1e-15);
    }

    #[test]
    fn masked_recon_ignores_unscored_cells() {
        let store = ParameterStore::new();
        let mut t = Tape::new(&store);
        let g = t.constant(Tensor::new(&[1, 4], vec![1.0, 1.0, 0.0, 0.0]).unwrap());
        let h = t.constant(Tensor::new(&[1, 4], vec![1.0, 0.0, 5.0, 5.0]).unwrap());
        let z = t.constant(Tensor::zeros(&[1, 2]));
        let lat = LatentParams { mu: z, log_var: z };
        let m = Tensor::new(&[4], vec![1.0, 1.0, 0.0, 0.0]).unwrap();
        let l = cvae_loss(&mut t, g, h, &lat, 0.01, Some(&m)).unwrap();
        assert_eq!(t.scalar(l.recon), 0.5);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut store = ParameterStore::new();
        let cvae = tiny(&mut store, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let eps = cvae.sample_eps(&mut rng);
        let gamma = Tensor::from_fn(&[1, 12], |i| ((i * 7) % 5) as f64 * 0.2);
        let cond = Tensor::from_fn(&[1, 5], |i| (i as f64 * 0.9).sin());
        let rep = grad_check(&store, &[gamma, cond], &GradCheckOptions::default(), |t, v| {
            let out = cvae.forward(t, v[0], v[1], eps.clone())?;
            Ok(cvae_loss(t, v[0], out.gamma_hat, &out.latent, DEFAULT_LAMBDA, None)?.total)
        })
        .unwrap();
        assert!(rep.max_rel_err < 1e-4, "{rep:?}");
    }
}
