//! Multiplicative-update NMF, the K-component loss, and the k-sweep.
//!
//! Updates use the standard Frobenius form `H <- H .* (W'V) ./ (W'WH + eps)`
//! then `W <- W .* (VH') ./ (WHH' + eps)`, which is the variant that
//! provably does not increase `||V - WH||_F`. The returned factor pair is
//! gauge-fixed by scaling each W column to unit L2 norm (H rows absorb the
//! scale), so downstream consumers of H see one canonical scaling.

use ndarray::{linalg::general_mat_mul, Array2, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::stack::DataMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    /// Uniform random in [0, 1) scaled by sqrt(mean(V) / k).
    #[default]
    UniformRandom,
}

#[derive(Debug, Clone)]
pub struct NmfConfig {
    pub k: usize,
    pub max_iter: usize,
    /// Relative loss-change stopping threshold.
    pub tol: f64,
    /// Guard added to update denominators.
    pub epsilon: f64,
    pub seed: u64,
    pub init: Init,
}

impl Default for NmfConfig {
    fn default() -> Self {
        Self {
            k: 1,
            max_iter: 300,
            tol: 1e-5,
            epsilon: 1e-12,
            seed: 0,
            init: Init::UniformRandom,
        }
    }
}

impl NmfConfig {
    pub fn with_k(&self, k: usize) -> Self {
        Self { k, ..self.clone() }
    }

    fn validate(&self) -> Result<()> {
        if self.k < 1 {
            return Err(Error::InvalidSpec("k must be >= 1".into()));
        }
        if self.max_iter < 1 {
            return Err(Error::InvalidSpec("max_iter must be >= 1".into()));
        }
        if !(self.tol >= 0.0) {
            return Err(Error::InvalidSpec("tol must be >= 0".into()));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidSpec("epsilon must be > 0".into()));
        }
        Ok(())
    }
}

/// One NMF result: feature matrix W `(px*py, k)`, coefficient matrix H
/// `(k, m*n)`, and the per-iteration Frobenius residual.
#[derive(Debug, Clone)]
pub struct Factorization {
    pub w: Array2<f64>,
    pub h: Array2<f64>,
    /// `||V - WH||_F` after init and after each iteration.
    pub loss_history: Vec<f64>,
    /// Mean absolute elementwise deviation of the final reconstruction.
    pub k_component_loss: f64,
    pub converged: bool,
    pub iterations_run: usize,
    pub k: usize,
    pub seed: u64,
}

impl Factorization {
    pub fn final_frobenius_loss(&self) -> f64 {
        *self.loss_history.last().expect("history is never empty")
    }
}

/// Runs seeded multiplicative updates until `max_iter` or the relative loss
/// change drops below `tol`.
pub fn nmf_factorize(v: &DataMatrix, config: &NmfConfig) -> Result<Factorization> {
    config.validate()?;
    let values = v.values();
    let (rows, cols) = (values.nrows(), values.ncols());
    if rows == 0 || cols == 0 {
        return Err(Error::EmptyMatrix);
    }
    if config.k > rows.min(cols) {
        log::warn!(
            "k = {} exceeds min(rows, cols) = {}; factorization is over-parameterized",
            config.k,
            rows.min(cols)
        );
    }
    let k = config.k;
    let eps = config.epsilon;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let scale = (values.mean().unwrap_or(0.0) / k as f64).sqrt();
    let mut w = Array2::from_shape_simple_fn((rows, k), || rng.random::<f64>() * scale);
    let mut h = Array2::from_shape_simple_fn((k, cols), || rng.random::<f64>() * scale);

    // Buffers reused across iterations.
    let mut wt_v = Array2::zeros((k, cols));
    let mut wt_w = Array2::zeros((k, k));
    let mut wtw_h = Array2::zeros((k, cols));
    let mut v_ht = Array2::zeros((rows, k));
    let mut h_ht = Array2::zeros((k, k));
    let mut w_hht = Array2::zeros((rows, k));
    let mut recon = Array2::zeros((rows, cols));

    let residual = |w: &Array2<f64>, h: &Array2<f64>, recon: &mut Array2<f64>| -> f64 {
        general_mat_mul(1.0, w, h, 0.0, recon);
        let mut acc = 0.0;
        Zip::from(values).and(&*recon).for_each(|&a, &b| {
            let d = a - b;
            acc += d * d;
        });
        acc.sqrt()
    };

    let mut loss_history = Vec::with_capacity(config.max_iter + 1);
    loss_history.push(residual(&w, &h, &mut recon));

    let mut converged = false;
    let mut iterations_run = 0;
    for iter in 0..config.max_iter {
        // H update with W fixed.
        general_mat_mul(1.0, &w.t(), values, 0.0, &mut wt_v);
        general_mat_mul(1.0, &w.t(), &w, 0.0, &mut wt_w);
        general_mat_mul(1.0, &wt_w, &h, 0.0, &mut wtw_h);
        Zip::from(&mut h).and(&wt_v).and(&wtw_h).for_each(|h, &num, &den| {
            *h *= num / (den + eps);
        });

        // W update with the fresh H fixed.
        general_mat_mul(1.0, values, &h.t(), 0.0, &mut v_ht);
        general_mat_mul(1.0, &h, &h.t(), 0.0, &mut h_ht);
        general_mat_mul(1.0, &w, &h_ht, 0.0, &mut w_hht);
        Zip::from(&mut w).and(&v_ht).and(&w_hht).for_each(|w, &num, &den| {
            *w *= num / (den + eps);
        });

        debug_assert!(
            w.iter().chain(h.iter()).all(|&x| x >= 0.0),
            "multiplicative update broke non-negativity at iteration {iter}"
        );

        let loss = residual(&w, &h, &mut recon);
        if !loss.is_finite() {
            return Err(Error::NonFinite { iteration: iter + 1 });
        }
        let prev = *loss_history.last().unwrap();
        loss_history.push(loss);
        iterations_run = iter + 1;
        if (loss - prev).abs() / prev.max(eps) < config.tol {
            converged = true;
            break;
        }
    }

    normalize_gauge(&mut w, &mut h);

    let mut fac = Factorization {
        w,
        h,
        loss_history,
        k_component_loss: 0.0,
        converged,
        iterations_run,
        k,
        seed: config.seed,
    };
    fac.k_component_loss = k_component_loss(v, &fac)?;
    Ok(fac)
}

/// Fixes the (WD, D^-1 H) scale freedom: W columns get unit L2 norm and H
/// rows absorb the factor. Zero columns are left untouched. WH is unchanged.
pub fn normalize_gauge(w: &mut Array2<f64>, h: &mut Array2<f64>) {
    for c in 0..w.ncols() {
        let norm = w.column(c).iter().map(|&x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            w.column_mut(c).mapv_inplace(|x| x / norm);
            h.row_mut(c).mapv_inplace(|x| x * norm);
        }
    }
}

/// Mean absolute elementwise deviation between V and W*H.
pub fn k_component_loss(v: &DataMatrix, fac: &Factorization) -> Result<f64> {
    let values = v.values();
    if fac.w.nrows() != values.nrows() || fac.h.ncols() != values.ncols() {
        return Err(Error::ShapeMismatch {
            expected: format!("W rows {} and H cols {}", values.nrows(), values.ncols()),
            actual: format!("W rows {} and H cols {}", fac.w.nrows(), fac.h.ncols()),
        });
    }
    let recon = fac.w.dot(&fac.h);
    let total: f64 = Zip::from(values)
        .and(&recon)
        .fold(0.0, |acc, &a, &b| acc + (a - b).abs());
    Ok(total / values.len() as f64)
}

/// Loss curve over a range of component counts.
#[derive(Debug, Clone)]
pub struct SweepResult {
    pub k_values: Vec<usize>,
    pub losses: Vec<f64>,
    pub factorizations: Vec<Factorization>,
}

impl SweepResult {
    pub fn factorization_for(&self, k: usize) -> Option<&Factorization> {
        self.k_values
            .iter()
            .position(|&kv| kv == k)
            .map(|i| &self.factorizations[i])
    }

    /// CSV columns: k, k_component_loss, iterations, converged.
    pub fn loss_curve_csv(&self) -> String {
        let mut out = String::from("k,k_component_loss,iterations,converged\n");
        for (i, &k) in self.k_values.iter().enumerate() {
            let fac = &self.factorizations[i];
            out.push_str(&format!(
                "{k},{},{},{}\n",
                self.losses[i], fac.iterations_run, fac.converged
            ));
        }
        out
    }
}

/// Factorizes once per k in `k_min..=k_max`, seeding run k with
/// `config.seed + k`. Runs are independent and execute in parallel; results
/// are ordered by k and bitwise independent of thread count.
pub fn sweep(v: &DataMatrix, k_min: usize, k_max: usize, config: &NmfConfig) -> Result<SweepResult> {
    if k_min < 1 || k_min > k_max {
        return Err(Error::InvalidSpec(format!(
            "bad sweep range [{k_min}, {k_max}]"
        )));
    }
    let k_values: Vec<usize> = (k_min..=k_max).collect();
    let factorizations: Vec<Factorization> = k_values
        .par_iter()
        .map(|&k| {
            let run = NmfConfig {
                k,
                seed: config.seed.wrapping_add(k as u64),
                ..config.clone()
            };
            nmf_factorize(v, &run).map_err(|e| Error::SweepFailure {
                k,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;
    let losses = factorizations.iter().map(|f| f.k_component_loss).collect();
    Ok(SweepResult {
        k_values,
        losses,
        factorizations,
    })
}
