use super::params::{Group, NetParams};
use crate::error::{validation, Result};
use crate::real::Real;

/// RMSProp accumulators and hyper-parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct OptState<T = f32> {
    pub lr: f64,
    pub decay: f64,
    pub eps: f64,
    acc: Vec<Vec<T>>,
}

impl<T: Real> OptState<T> {
    pub fn new(params: &NetParams<T>, lr: f64, decay: f64, eps: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(validation("learning rate must be positive"));
        }
        if !(0.0..1.0).contains(&decay) {
            return Err(validation("RMSProp decay must lie in [0, 1)"));
        }
        if !(eps > 0.0 && eps.is_finite()) {
            return Err(validation("RMSProp epsilon must be positive"));
        }
        Ok(OptState {
            lr,
            decay,
            eps,
            acc: params.blocks().iter().map(|b| vec![T::zero(); b.data.len()]).collect(),
        })
    }

    /// Accumulator of block `i`.
    pub fn accumulator(&self, i: usize) -> &[T] {
        &self.acc[i]
    }
}

/// Cosine schedule from `lr` at the first epoch to `min_lr` at the last.
pub fn cosine_lr(lr: f64, min_lr: f64, epoch: usize, epochs: usize) -> f64 {
    if epochs <= 1 {
        return lr;
    }
    let t = epoch as f64 / (epochs - 1) as f64;
    min_lr + 0.5 * (lr - min_lr) * (1.0 + (std::f64::consts::PI * t).cos())
}

/// One RMSProp update: `acc ← ρ·acc + (1−ρ)·g²`, `p ← p − lr·g/(√acc + ε)`.
/// Localizer blocks use `lr · loc_lr_scale`.
pub fn rmsprop_step<T: Real>(params: &mut NetParams<T>, grads: &NetParams<T>, state: &mut OptState<T>, loc_lr_scale: f64) {
    let rho = T::of(state.decay);
    let one_minus = T::of(1.0 - state.decay);
    let eps = T::of(state.eps);
    for ((pb, gb), acc) in params.blocks_mut().iter_mut().zip(grads.blocks()).zip(state.acc.iter_mut()) {
        let lr = T::of(match pb.group {
            Group::Main => state.lr,
            Group::Localizer => state.lr * loc_lr_scale,
        });
        for ((p, &g), a) in pb.data.iter_mut().zip(&gb.data).zip(acc.iter_mut()) {
            *a = rho * *a + one_minus * g * g;
            *p -= lr * g / (a.sqrt() + eps);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::net::config::NetConfig;

    fn setup() -> (NetParams<f64>, NetParams<f64>, OptState<f64>) {
        let cfg = NetConfig {
            use_localizer: true,
            ..Default::default()
        };
        let p = NetParams::<f64>::init(&cfg).unwrap();
        let g = p.zeros_like();
        let s = OptState::new(&p, 1e-3, 0.9, 1e-8).unwrap();
        (p, g, s)
    }

    #[test]
    fn zero_gradient_is_a_no_op() {
        let (mut p, g, mut s) = setup();
        let before = p.clone();
        rmsprop_step(&mut p, &g, &mut s, 0.035);
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_closed_form() {
        let (mut p, mut g, mut s) = setup();
        let before = p.clone();
        for b in g.blocks_mut() {
            b.data.iter_mut().for_each(|v| *v = -0.3);
        }
        rmsprop_step(&mut p, &g, &mut s, 0.035);
        let want = 1e-3 * 0.3 / ((0.1f64).sqrt() * 0.3 + 1e-8);
        for (a, b) in p.blocks().iter().zip(before.blocks()) {
            let scale = if a.group == Group::Localizer { 0.035 } else { 1.0 };
            for (x, y) in a.data.iter().zip(&b.data) {
                assert!((x - y - scale * want).abs() < 1e-12);
            }
        }
        assert!(s.accumulator(0).iter().all(|&a| a >= 0.0));
    }

    #[test]
    fn rejects_bad_hyper_parameters() {
        let (p, _, _) = setup();
        assert!(OptState::new(&p, 0.0, 0.9, 1e-8).is_err());
        assert!(OptState::new(&p, 1e-3, 1.0, 1e-8).is_err());
        assert!(OptState::new(&p, 1e-3, 0.9, 0.0).is_err());
    }
}
