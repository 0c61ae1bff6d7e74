//! Adam / AdamW over flat parameter blocks.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled (AdamW) weight decay; 0 gives plain Adam.
    pub weight_decay: f64,
}

impl AdamConfig {
    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }

    pub fn adamw(lr: f64, weight_decay: f64) -> Self {
        Self {
            weight_decay,
            ..Self::adam(lr)
        }
    }
}

/// Optimizer state: one first/second moment buffer per parameter block.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub config: AdamConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(config: AdamConfig, block_sizes: &[usize]) -> Self {
        Self {
            config,
            step: 0,
            m: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: block_sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    /// One update. `params[i]` and `grads[i]` must match block `i` in size.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[Vec<f64>]) {
        assert_eq!(params.len(), self.m.len(), "parameter block count changed");
        assert_eq!(grads.len(), self.m.len(), "gradient block count changed");
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (((p, g), m), v) in params
            .iter_mut()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for i in 0..p.len() {
                if c.weight_decay != 0.0 {
                    p[i] -= c.lr * c.weight_decay * p[i];
                }
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                p[i] -= c.lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }

    /// Little-endian dump: step, then every m block, then every v block.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.m.len() as u64).to_le_bytes());
        for block in self.m.iter().chain(&self.v) {
            out.extend_from_slice(&(block.len() as u64).to_le_bytes());
            for x in block {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(config: AdamConfig, bytes: &[u8]) -> Option<Self> {
        let mut cur = bytes;
        let take_u64 = |cur: &mut &[u8]| -> Option<u64> {
            let (head, rest) = cur.split_first_chunk::<8>()?;
            *cur = rest;
            Some(u64::from_le_bytes(*head))
        };
        let step = take_u64(&mut cur)?;
        let blocks = take_u64(&mut cur)? as usize;
        let mut all = Vec::with_capacity(blocks * 2);
        for _ in 0..blocks * 2 {
            let n = take_u64(&mut cur)? as usize;
            let mut block = Vec::with_capacity(n);
            for _ in 0..n {
                block.push(f64::from_bits(take_u64(&mut cur)?));
            }
            all.push(block);
        }
        if !cur.is_empty() {
            return None;
        }
        let v = all.split_off(blocks);
        Some(Self {
            config,
            step,
            m: all,
            v,
        })
    }
}
