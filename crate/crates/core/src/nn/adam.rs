use super::{NetError, Parameters};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Moments are laid out in the parameters'
/// visiting order.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl AdamState {
    pub fn new<P: Parameters + ?Sized>(config: AdamConfig, params: &P) -> Self {
        let mut first = Vec::new();
        params.visit(&mut |_, p| first.push(vec![0.0; p.len()]));
        let second = first.clone();
        AdamState { config, step: 0, first, second }
    }

    /// One update of `params` along `grads` (same layout). Nothing is written
    /// when a gradient entry is not finite.
    pub fn step<P: Parameters + ?Sized>(&mut self, params: &mut P, grads: &P) -> Result<(), NetError> {
        let mut flat: Vec<Vec<f64>> = Vec::with_capacity(self.first.len());
        let mut bad = None;
        grads.visit(&mut |name, g| {
            if bad.is_none() && g.iter().any(|v| !v.is_finite()) {
                bad = Some(name.to_string());
            }
            flat.push(g.to_vec());
        });
        if let Some(name) = bad {
            return Err(NetError::NonFiniteGradient(name));
        }
        if flat.len() != self.first.len() || flat.iter().zip(&self.first).any(|(g, m)| g.len() != m.len()) {
            return Err(NetError::Shape("gradient layout does not match optimizer state".into()));
        }
        let mut layout_ok = true;
        let mut i = 0;
        params.visit(&mut |_, p| {
            layout_ok &= i < flat.len() && p.len() == flat[i].len();
            i += 1;
        });
        if !layout_ok || i != flat.len() {
            return Err(NetError::Shape("parameter layout does not match optimizer state".into()));
        }

        self.step += 1;
        let AdamConfig { lr, beta1, beta2, eps } = self.config;
        let t = self.step as i32;
        let c1 = 1.0 - beta1.powi(t);
        let c2 = 1.0 - beta2.powi(t);
        let mut i = 0;
        let (first, second) = (&mut self.first, &mut self.second);
        params.visit_mut(&mut |_, p| {
            let (m, v, g) = (&mut first[i], &mut second[i], &flat[i]);
            for j in 0..p.len() {
                m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
                v[j] = beta2 * v[j] + (1.0 - beta2) * g[j] * g[j];
                let mhat = m[j] / c1;
                let vhat = v[j] / c2;
                p[j] -= lr * mhat / (vhat.sqrt() + eps);
            }
            i += 1;
        });
        Ok(())
    }
}
