//! Browser demo: sample a conductivity-like Gaussian random field, measure it
//! through the elliptic forward model, and invert with truncated SVD.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wasm_bindgen::prelude::*;

use vinet_core::classical::{normal_eig, tsvd_invert, EigPairs};
use vinet_core::data::{add_multiplicative_noise, GrfSampler};
use vinet_core::forward::{EllipticForward, LinearForward, SensorSet};
use vinet_core::report::relative_error;
use vinet_core::{Grid, GridFunction};

fn js_err(e: vinet_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    h: EllipticForward,
    grf: GrfSampler,
    eig: EigPairs,
    truth: GridFunction,
    data: Vec<f64>,
    last_relerr: f64,
}

#[wasm_bindgen]
impl Demo {
    /// `n`×`n` grid, `m`×`m` sensor lattice. Precomputes the eigenpairs of H*H.
    #[wasm_bindgen(constructor)]
    pub fn new(n: usize, m: usize) -> Result<Demo, JsError> {
        if n < 5 || m == 0 || m * m > n * n {
            return Err(JsError::new("need n ≥ 5 and 1 ≤ m² ≤ n²"));
        }
        let grid = Grid::unit(n);
        let h = EllipticForward::new(grid, 0.01, SensorSet::lattice(m)).map_err(js_err)?;
        let grf = GrfSampler::new(grid, (10.0, 1.0), 2.0).map_err(js_err)?;
        let rank = (m * m).min(grid.len() - 1);
        let eig = normal_eig(&h, rank, (grid.len() - rank).min(10), 1, &mut ChaCha8Rng::seed_from_u64(0)).map_err(js_err)?;
        let data = vec![0.0; h.n_data()];
        Ok(Demo { h, grf, eig, truth: GridFunction::constant(grid, 2.0), data, last_relerr: f64::NAN })
    }

    pub fn n(&self) -> usize {
        self.h.grid().nx
    }

    pub fn n_data(&self) -> usize {
        self.h.n_data()
    }

    /// Draws a new truth (mean 2, anisotropic correlation); returns it row-major.
    pub fn sample_truth(&mut self, seed: u64) -> Result<Vec<f64>, JsError> {
        let mean = GridFunction::constant(self.h.grid(), 2.0);
        self.truth = self.grf.sample(&mean, &mut ChaCha8Rng::seed_from_u64(seed)).map_err(js_err)?;
        Ok(self.truth.values.clone())
    }

    /// Noisy sensor readings d = Hu + a·η⊙Hu of the current truth.
    pub fn measure(&mut self, noise_level: f64, seed: u64) -> Result<Vec<f64>, JsError> {
        let clean = self.h.apply(&self.truth).map_err(js_err)?;
        self.data = add_multiplicative_noise(&clean, noise_level, &mut ChaCha8Rng::seed_from_u64(seed)).0;
        Ok(self.data.clone())
    }

    /// TSVD reconstruction keeping eigenvalues ≥ `level`·λ₁.
    pub fn invert(&mut self, level: f64) -> Result<Vec<f64>, JsError> {
        let lam1 = self.eig.values.first().copied().unwrap_or(0.0);
        let u = tsvd_invert(&self.data, &self.eig, &self.h, level * lam1).map_err(js_err)?;
        self.last_relerr = relative_error(&u, &self.truth).map_err(js_err)?;
        Ok(u.values)
    }

    /// Number of retained modes at a truncation level.
    pub fn modes_kept(&self, level: f64) -> usize {
        let lam1 = self.eig.values.first().copied().unwrap_or(0.0);
        self.eig.values.iter().filter(|&&l| l >= level * lam1).count()
    }

    pub fn last_relerr(&self) -> f64 {
        self.last_relerr
    }
}
