//! AdamW with decoupled weight decay, plus the control-variate machinery
//! that corrects local LoRA gradients toward the global direction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

/// AdamW hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

impl AdamWConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.lr >= 0.0
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0
            && self.weight_decay >= 0.0
            && [self.lr, self.eps, self.weight_decay].iter().all(|x| x.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidConfig(format!("invalid AdamW hyperparameters {self:?}")))
        }
    }
}

/// Moment estimates for one parameter matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamWState {
    pub m: Matrix,
    pub v: Matrix,
    pub step: u64,
    pub config: AdamWConfig,
}

impl AdamWState {
    pub fn new(rows: usize, cols: usize, config: AdamWConfig) -> Self {
        Self {
            m: Matrix::zeros(rows, cols),
            v: Matrix::zeros(rows, cols),
            step: 0,
            config,
        }
    }

    /// In-place variant of [`adamw_step`].
    pub fn update(&mut self, param: &mut Matrix, grad: &Matrix) -> Result<()> {
        if param.shape() != grad.shape() || param.shape() != self.m.shape() {
            return Err(Error::ShapeMismatch {
                op: "adamw_step",
                lhs: param.shape(),
                rhs: grad.shape(),
            });
        }
        if !grad.is_finite() {
            return Err(Error::NonFinite(format!(
                "AdamW gradient at step {}",
                self.step + 1
            )));
        }
        let AdamWConfig {
            lr,
            beta1,
            beta2,
            eps,
            weight_decay,
        } = self.config;
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        let m = self.m.as_mut_slice();
        let v = self.v.as_mut_slice();
        for (((p, &g), mi), vi) in param
            .as_mut_slice()
            .iter_mut()
            .zip(grad.as_slice())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * g;
            *vi = beta2 * *vi + (1.0 - beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * (m_hat / (v_hat.sqrt() + eps) + weight_decay * *p);
        }
        Ok(())
    }
}

/// One AdamW step; returns the new parameter and state.
pub fn adamw_step(param: &Matrix, grad: &Matrix, state: &AdamWState) -> Result<(Matrix, AdamWState)> {
    let mut p = param.clone();
    let mut s = state.clone();
    s.update(&mut p, grad)?;
    Ok((p, s))
}

/// `raw + global_c - local_c`.
pub fn corrected_gradient(raw: &Matrix, global_c: &Matrix, local_c: &Matrix) -> Result<Matrix> {
    if raw.shape() != global_c.shape() || raw.shape() != local_c.shape() {
        return Err(Error::ShapeMismatch {
            op: "corrected_gradient",
            lhs: raw.shape(),
            rhs: if raw.shape() != global_c.shape() {
                global_c.shape()
            } else {
                local_c.shape()
            },
        });
    }
    Ok(Matrix::from_fn(raw.rows(), raw.cols(), |i, j| {
        raw.get(i, j) + global_c.get(i, j) - local_c.get(i, j)
    }))
}

/// Returns `(last_raw_grad - local_c, last_raw_grad)`.
pub fn local_control_update(last_raw_grad: &Matrix, local_c: &Matrix) -> Result<(Matrix, Matrix)> {
    let delta = last_raw_grad.sub(local_c)?;
    Ok((delta, last_raw_grad.clone()))
}

/// `global_c + mean(deltas)`, uniformly weighted over the participants.
pub fn server_control_aggregate(global_c: &Matrix, deltas: &[Matrix]) -> Result<Matrix> {
    if deltas.is_empty() {
        return Err(Error::Empty("control deltas"));
    }
    let mut sum = Matrix::zeros(global_c.rows(), global_c.cols());
    for d in deltas {
        sum.add_scaled_assign(d, 1.0)?;
    }
    global_c.add(&sum.scale(1.0 / deltas.len() as f64))
}

/// Control variates for the `A` (`rank x k`) and `B` (`d x rank`) factors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlVariates {
    pub c_a: Matrix,
    pub c_b: Matrix,
}

impl ControlVariates {
    pub fn zeros(d: usize, k: usize, rank: usize) -> Self {
        Self {
            c_a: Matrix::zeros(rank, k),
            c_b: Matrix::zeros(d, rank),
        }
    }

    pub fn new(c_a: Matrix, c_b: Matrix) -> Result<Self> {
        if c_a.rows() != c_b.cols() {
            return Err(Error::ShapeMismatch {
                op: "ControlVariates::new",
                lhs: c_a.shape(),
                rhs: c_b.shape(),
            });
        }
        Ok(Self { c_a, c_b })
    }

    pub fn rank(&self) -> usize {
        self.c_a.rows()
    }

    /// Leading `rank` rows of `c_a` and columns of `c_b`.
    pub fn slice(&self, rank: usize) -> Result<ControlVariates> {
        let (c_a, c_b) = slice_controls(self, rank)?;
        Ok(ControlVariates { c_a, c_b })
    }

    /// Zero-extends to `rank`.
    pub fn pad(&self, rank: usize) -> Result<ControlVariates> {
        Ok(ControlVariates {
            c_a: pad_delta_a(&self.c_a, rank)?,
            c_b: pad_delta_b(&self.c_b, rank)?,
        })
    }

    pub fn sub(&self, other: &ControlVariates) -> Result<ControlVariates> {
        Ok(ControlVariates {
            c_a: self.c_a.sub(&other.c_a)?,
            c_b: self.c_b.sub(&other.c_b)?,
        })
    }

    /// Number of scalars in both matrices.
    pub fn len(&self) -> usize {
        self.c_a.rows() * self.c_a.cols() + self.c_b.rows() * self.c_b.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Leading slices of global controls matching a client of rank `client_rank`.
pub fn slice_controls(global: &ControlVariates, client_rank: usize) -> Result<(Matrix, Matrix)> {
    if client_rank == 0 || client_rank > global.rank() {
        return Err(Error::RankBounds(format!(
            "client rank {client_rank} exceeds control rank {}",
            global.rank()
        )));
    }
    Ok((global.c_a.slice_rows(client_rank)?, global.c_b.slice_cols(client_rank)?))
}

/// Zero-pads an `A`-shaped (`r_k x k`) delta to `server_rank` rows.
pub fn pad_delta_a(delta: &Matrix, server_rank: usize) -> Result<Matrix> {
    if delta.rows() > server_rank {
        return Err(Error::RankBounds(format!(
            "delta rank {} exceeds server rank {server_rank}",
            delta.rows()
        )));
    }
    delta.zero_pad(server_rank, delta.cols())
}

/// Zero-pads a `B`-shaped (`d x r_k`) delta to `server_rank` columns.
pub fn pad_delta_b(delta: &Matrix, server_rank: usize) -> Result<Matrix> {
    if delta.cols() > server_rank {
        return Err(Error::RankBounds(format!(
            "delta rank {} exceeds server rank {server_rank}",
            delta.cols()
        )));
    }
    delta.zero_pad(delta.rows(), server_rank)
}

/// Embeds a rank-`r_k` control delta pair into rank `server_rank`.
pub fn pad_delta(delta: &ControlVariates, server_rank: usize) -> Result<ControlVariates> {
    delta.pad(server_rank)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn corrected_gradient_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let raw = random(3, 2, &mut rng);
        let z = Matrix::zeros(3, 2);
        assert_eq!(corrected_gradient(&raw, &z, &z).unwrap(), raw);
        let one = Matrix::from_rows(&[&[0.0]]).unwrap();
        let g = corrected_gradient(
            &one,
            &Matrix::from_rows(&[&[1.0]]).unwrap(),
            &Matrix::from_rows(&[&[0.5]]).unwrap(),
        )
        .unwrap();
        assert_eq!(g.get(0, 0), 0.5);
        let gc = random(3, 2, &mut rng);
        let lc = random(3, 2, &mut rng);
        let out = corrected_gradient(&raw, &gc, &lc).unwrap();
        for i in 0..3 {
            for j in 0..2 {
                assert!((out.get(i, j) - (raw.get(i, j) + gc.get(i, j) - lc.get(i, j))).abs() <= 1e-15);
            }
        }
        assert!(corrected_gradient(&raw, &Matrix::zeros(2, 3), &z).is_err());
    }

    #[test]
    fn zero_grad_leaves_param() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = random(2, 2, &mut rng);
        let state = AdamWState::new(2, 2, AdamWConfig { lr: 0.1, ..Default::default() });
        let (p2, s2) = adamw_step(&p, &Matrix::zeros(2, 2), &state).unwrap();
        assert_eq!(p2, p);
        assert_eq!(s2.step, 1);
    }

    #[test]
    fn first_step_closed_form() {
        let cfg = AdamWConfig { lr: 0.01, ..Default::default() };
        let p = Matrix::from_rows(&[&[1.0, -2.0, 0.5]]).unwrap();
        let g = Matrix::from_rows(&[&[0.3, -4.0, 1e-3]]).unwrap();
        let (p2, _) = adamw_step(&p, &g, &AdamWState::new(1, 3, cfg)).unwrap();
        for j in 0..3 {
            let gj = g.get(0, j);
            let expected = p.get(0, j) - cfg.lr * gj / (gj.abs() + cfg.eps);
            assert!((p2.get(0, j) - expected).abs() <= 1e-15);
        }
    }

    /// Straight scalar transcription of the recursions.
    fn scalar_reference(x0: f64, target: f64, cfg: AdamWConfig, steps: usize) -> Vec<f64> {
        let (mut x, mut m, mut v) = (x0, 0.0, 0.0);
        let mut out = Vec::new();
        for t in 1..=steps {
            let g = 2.0 * (x - target);
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g;
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g;
            let mh = m / (1.0 - cfg.beta1.powi(t as i32));
            let vh = v / (1.0 - cfg.beta2.powi(t as i32));
            x -= cfg.lr * (mh / (vh.sqrt() + cfg.eps) + cfg.weight_decay * x);
            out.push(x);
        }
        out
    }

    #[test]
    fn quadratic_trajectory_matches_scalar_reference() {
        let cfg = AdamWConfig { lr: 0.05, weight_decay: 0.01, ..Default::default() };
        let reference = scalar_reference(3.0, -1.0, cfg, 10);
        let mut p = Matrix::from_rows(&[&[3.0]]).unwrap();
        let mut state = AdamWState::new(1, 1, cfg);
        for expected in reference {
            let g = p.map(|x| 2.0 * (x + 1.0));
            state.update(&mut p, &g).unwrap();
            assert!((p.get(0, 0) - expected).abs() <= 1e-12);
        }
        assert_eq!(state.step, 10);
    }

    #[test]
    fn large_eps_vanishing_and_lr_monotone() {
        let p = Matrix::from_rows(&[&[1.0, 2.0]]).unwrap();
        let g = Matrix::from_rows(&[&[0.5, -0.7]]).unwrap();
        let tiny = AdamWConfig { lr: 0.1, eps: 1e12, ..Default::default() };
        let (p2, _) = adamw_step(&p, &g, &AdamWState::new(1, 2, tiny)).unwrap();
        assert!(p2.sub(&p).unwrap().frobenius_norm() < 1e-12);
        let mut last = 0.0;
        for lr in [1e-4, 1e-3, 1e-2, 1e-1] {
            let cfg = AdamWConfig { lr, ..Default::default() };
            let (p2, _) = adamw_step(&p, &g, &AdamWState::new(1, 2, cfg)).unwrap();
            let moved = p2.sub(&p).unwrap().frobenius_norm();
            assert!(moved > last);
            last = moved;
        }
    }

    #[test]
    fn nonfinite_gradient_rejected() {
        let p = Matrix::zeros(1, 1);
        let g = Matrix::from_rows(&[&[f64::NAN]]).unwrap();
        let state = AdamWState::new(1, 1, AdamWConfig::default());
        assert!(matches!(adamw_step(&p, &g, &state), Err(Error::NonFinite(_))));
    }

    #[test]
    fn local_control_update_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = random(2, 3, &mut rng);
        let (delta, c) = local_control_update(&g, &Matrix::zeros(2, 3)).unwrap();
        assert_eq!(delta, g);
        assert_eq!(c, g);
        let (delta, c2) = local_control_update(&g, &c).unwrap();
        assert_eq!(delta, Matrix::zeros(2, 3));
        assert_eq!(c2, c);
    }

    #[test]
    fn server_aggregate_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gc = random(2, 2, &mut rng);
        assert_eq!(
            server_control_aggregate(&gc, &[Matrix::zeros(2, 2), Matrix::zeros(2, 2)]).unwrap(),
            gc
        );
        let d = random(2, 2, &mut rng);
        assert_eq!(server_control_aggregate(&gc, std::slice::from_ref(&d)).unwrap(), gc.add(&d).unwrap());
        let ds: Vec<Matrix> = (0..3).map(|_| random(2, 2, &mut rng)).collect();
        let out = server_control_aggregate(&gc, &ds).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let mean = (ds[0].get(i, j) + ds[1].get(i, j) + ds[2].get(i, j)) / 3.0;
                assert!((out.get(i, j) - (gc.get(i, j) + mean)).abs() <= 1e-15);
            }
        }
        assert_eq!(server_control_aggregate(&gc, &[]).unwrap_err(), Error::Empty("control deltas"));
    }

    #[test]
    fn slice_and_pad() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let global = ControlVariates::new(random(4, 3, &mut rng), random(5, 4, &mut rng)).unwrap();
        let (a, b) = slice_controls(&global, 4).unwrap();
        assert_eq!((a, b), (global.c_a.clone(), global.c_b.clone()));
        assert!(slice_controls(&global, 5).is_err());

        let small = ControlVariates::new(random(2, 3, &mut rng), random(5, 2, &mut rng)).unwrap();
        assert_eq!(pad_delta(&small, 2).unwrap(), small);
        let padded = pad_delta(&small, 4).unwrap();
        assert_eq!(padded.rank(), 4);
        assert_eq!(padded.slice(2).unwrap(), small);
        assert_eq!(padded.c_a.row_range(2, 4).unwrap().max_abs(), 0.0);
        assert!(pad_delta(&global, 3).is_err());
    }
}
