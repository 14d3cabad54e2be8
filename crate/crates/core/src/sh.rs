//! Real spherical-harmonic color evaluation up to degree 2, using the
//! sign conventions of the reference splatting renderers.

use nalgebra::Vector3;

use crate::scene::SH_C0;

const SH_C1: f64 = 0.488_602_511_902_919_9;
const SH_C2: [f64; 5] = [
    1.092_548_430_592_079_2,
    -1.092_548_430_592_079_2,
    0.315_391_565_252_520_05,
    -1.092_548_430_592_079_2,
    0.546_274_215_296_039_6,
];

/// Basis values and their gradients with respect to the unit view direction.
#[derive(Clone, Copy, Debug)]
pub struct ShBasis {
    pub count: usize,
    pub values: [f64; 9],
    pub grads: [[f64; 3]; 9],
}

impl ShBasis {
    pub fn eval(degree: u8, dir: &Vector3<f64>) -> Self {
        let (x, y, z) = (dir.x, dir.y, dir.z);
        let mut values = [0.0; 9];
        let mut grads = [[0.0; 3]; 9];
        values[0] = SH_C0;
        let mut count = 1;
        if degree >= 1 {
            values[1] = -SH_C1 * y;
            grads[1] = [0.0, -SH_C1, 0.0];
            values[2] = SH_C1 * z;
            grads[2] = [0.0, 0.0, SH_C1];
            values[3] = -SH_C1 * x;
            grads[3] = [-SH_C1, 0.0, 0.0];
            count = 4;
        }
        if degree >= 2 {
            values[4] = SH_C2[0] * x * y;
            grads[4] = [SH_C2[0] * y, SH_C2[0] * x, 0.0];
            values[5] = SH_C2[1] * y * z;
            grads[5] = [0.0, SH_C2[1] * z, SH_C2[1] * y];
            values[6] = SH_C2[2] * (2.0 * z * z - x * x - y * y);
            grads[6] = [-2.0 * SH_C2[2] * x, -2.0 * SH_C2[2] * y, 4.0 * SH_C2[2] * z];
            values[7] = SH_C2[3] * x * z;
            grads[7] = [SH_C2[3] * z, 0.0, SH_C2[3] * x];
            values[8] = SH_C2[4] * (x * x - y * y);
            grads[8] = [2.0 * SH_C2[4] * x, -2.0 * SH_C2[4] * y, 0.0];
            count = 9;
        }
        Self { count, values, grads }
    }

    /// Unclamped color `Σ_k b_k c_k + 0.5` for coefficients grouped per basis.
    pub fn color(&self, coeffs: &[f64]) -> [f64; 3] {
        let mut rgb = [0.5; 3];
        for k in 0..self.count {
            for (ch, v) in rgb.iter_mut().enumerate() {
                *v += self.values[k] * coeffs[3 * k + ch];
            }
        }
        rgb
    }

    /// Gradient of `Σ_ch g_ch · color_ch` with respect to the unit direction.
    pub fn direction_grad(&self, coeffs: &[f64], g_color: &[f64; 3]) -> Vector3<f64> {
        let mut out = Vector3::zeros();
        for k in 1..self.count {
            let w: f64 = (0..3).map(|ch| g_color[ch] * coeffs[3 * k + ch]).sum();
            out += Vector3::new(self.grads[k][0], self.grads[k][1], self.grads[k][2]) * w;
        }
        out
    }
}
