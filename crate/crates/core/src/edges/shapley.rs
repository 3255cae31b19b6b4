// SPDX-License-Identifier: MIT OR Apache-2.0

use serde::{Deserialize, Serialize};

use crate::component::{Channel, ComponentId};
use crate::error::{Error, Result};
use crate::fingerprint::NativeTargets;
use crate::model::{ActivationCache, CoalitionSpec, Model};
use crate::ops;

/// Shapley values of the Q, K and V inputs of one head.
///
/// `coalition_values[bits]` is `S_C` for the coalition with
/// `CoalitionSpec::bits() == bits`: the head's mixed output minus its
/// all-corrupt output, projected on the head's native target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShapleyWeights {
    pub phi_q: f32,
    pub phi_k: f32,
    pub phi_v: f32,
    pub coalition_values: [f32; 8],
}

impl ShapleyWeights {
    /// Closed form for three players: weight 1/3 on the marginal
    /// contribution to the empty and the two-player coalition, 1/6 on each
    /// single-player coalition.
    pub fn from_values(values: [f32; 8]) -> Self {
        let s = |bits: u8| values[bits as usize] as f64;
        let phi = |me: u8| {
            let others: Vec<u8> = [1u8, 2, 4].into_iter().filter(|&b| b != me).collect();
            let (a, b) = (others[0], others[1]);
            (s(me) - s(0)) / 3.0
                + (s(me | a) - s(a)) / 6.0
                + (s(me | b) - s(b)) / 6.0
                + (s(me | a | b) - s(a | b)) / 3.0
        };
        ShapleyWeights {
            phi_q: phi(1) as f32,
            phi_k: phi(2) as f32,
            phi_v: phi(4) as f32,
            coalition_values: values,
        }
    }

    pub fn sum(&self) -> f32 {
        self.phi_q + self.phi_k + self.phi_v
    }

    /// `φ / Σφ`, or uniform thirds when `|Σφ| ≤ 1e-8`.
    pub fn normalized(&self) -> [f32; 3] {
        let total = self.sum();
        if total.abs() > 1e-8 {
            [self.phi_q / total, self.phi_k / total, self.phi_v / total]
        } else {
            [1.0 / 3.0; 3]
        }
    }

    /// `|φ| / Σ|φ|`, the coordinates of a ternary plot; uniform when all
    /// three vanish.
    pub fn abs_normalized(&self) -> [f32; 3] {
        let a = [self.phi_q.abs(), self.phi_k.abs(), self.phi_v.abs()];
        let total: f32 = a.iter().sum();
        if total > 1e-8 {
            a.map(|x| x / total)
        } else {
            [1.0 / 3.0; 3]
        }
    }

    pub fn normalized_for(&self, channel: Channel) -> f32 {
        let n = self.normalized();
        match channel {
            Channel::Q => n[0],
            Channel::K => n[1],
            Channel::V => n[2],
            _ => 1.0,
        }
    }
}

/// Measures all eight coalitions of a head at the final position and
/// returns the closed-form Shapley values.
pub fn shapley_qkv(
    model: &Model,
    head: ComponentId,
    clean: &ActivationCache,
    corrupt: &ActivationCache,
    targets: &NativeTargets,
) -> Result<ShapleyWeights> {
    let ComponentId::Head { layer, head: h } = head else {
        return Err(Error::InvalidComponent(head));
    };
    let t = clean.last();
    let target = targets.get(head);
    let z_empty = model.head_coalition_output(layer, h, clean, corrupt, CoalitionSpec::EMPTY, t)?;
    let mut values = [0.0f32; 8];
    for c in CoalitionSpec::all().skip(1) {
        let z = model.head_coalition_output(layer, h, clean, corrupt, c, t)?;
        values[c.bits() as usize] = ops::dot(&ops::sub(&z, &z_empty), target);
    }
    Ok(ShapleyWeights::from_values(values))
}
