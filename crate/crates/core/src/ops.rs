//! Real-valued layer primitives on single NHWC items, shared by float
//! training and by the binary64 replay of the integer engine.
//!
//! Layouts match the quantized model: dense `[O, I]`, conv `OHWI`,
//! depthwise `[KH, KW, C]`. Padding taps contribute zero, so callers that
//! replay the integer path feed inputs centred on the zero point.

use crate::error::{Error, Result};
use crate::geometry::{Padding, Window};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinearKind {
    Dense,
    Conv2d,
    Depthwise,
}

/// A weighted layer bound to a fixed input shape.
#[derive(Debug, Clone)]
pub struct LinearOp {
    pub kind: LinearKind,
    pub input: [usize; 3],
    pub output: [usize; 3],
    pub kernel: (usize, usize),
    window: Option<Window>,
}

impl LinearOp {
    pub fn dense(features: usize, outputs: usize) -> LinearOp {
        LinearOp {
            kind: LinearKind::Dense,
            input: [1, 1, features],
            output: [1, 1, outputs],
            kernel: (1, 1),
            window: None,
        }
    }

    pub fn conv2d(
        input: [usize; 3],
        outputs: usize,
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<LinearOp> {
        let window = Window::new((input[0], input[1]), kernel, stride, padding)?;
        let (oh, ow) = window.output();
        Ok(LinearOp {
            kind: LinearKind::Conv2d,
            input,
            output: [oh, ow, outputs],
            kernel,
            window: Some(window),
        })
    }

    pub fn depthwise(
        input: [usize; 3],
        kernel: (usize, usize),
        stride: (usize, usize),
        padding: Padding,
    ) -> Result<LinearOp> {
        let window = Window::new((input[0], input[1]), kernel, stride, padding)?;
        let (oh, ow) = window.output();
        Ok(LinearOp {
            kind: LinearKind::Depthwise,
            input,
            output: [oh, ow, input[2]],
            kernel,
            window: Some(window),
        })
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let (kh, kw) = self.kernel;
        match self.kind {
            LinearKind::Dense => vec![self.output[2], self.input[2]],
            LinearKind::Conv2d => vec![self.output[2], kh, kw, self.input[2]],
            LinearKind::Depthwise => vec![kh, kw, self.input[2]],
        }
    }

    pub fn weight_len(&self) -> usize {
        self.weight_shape().iter().product()
    }

    pub fn channels(&self) -> usize {
        self.output[2]
    }

    pub fn input_len(&self) -> usize {
        self.input.iter().product()
    }

    pub fn output_len(&self) -> usize {
        self.output.iter().product()
    }

    /// Terms summed into one output (excluding the bias).
    pub fn fan_in(&self) -> usize {
        let (kh, kw) = self.kernel;
        match self.kind {
            LinearKind::Dense => self.input[2],
            LinearKind::Conv2d => kh * kw * self.input[2],
            LinearKind::Depthwise => kh * kw,
        }
    }

    fn check(&self, x: &[f64], w: &[f64], b: &[f64], out: usize) -> Result<()> {
        if x.len() != self.input_len()
            || w.len() != self.weight_len()
            || b.len() != self.channels()
            || out != self.output_len()
        {
            return Err(Error::Shape(format!(
                "{:?} op given x {}, w {}, b {}, out {}",
                self.kind,
                x.len(),
                w.len(),
                b.len(),
                out
            )));
        }
        Ok(())
    }

    /// `out = b + Σ w·x`.
    pub fn forward(&self, x: &[f64], w: &[f64], b: &[f64], out: &mut [f64]) -> Result<()> {
        self.check(x, w, b, out.len())?;
        let c = self.input[2];
        let outs = self.channels();
        for chunk in out.chunks_exact_mut(outs) {
            chunk.copy_from_slice(b);
        }
        match self.kind {
            LinearKind::Dense => {
                for (o, slot) in out.iter_mut().enumerate() {
                    *slot += w[o * c..(o + 1) * c].iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                }
            }
            LinearKind::Conv2d => {
                let (kh, kw) = self.kernel;
                self.for_each_tap(|pos, ty, tx, src| {
                    let px = &x[src * c..(src + 1) * c];
                    let acc = &mut out[pos * outs..(pos + 1) * outs];
                    for (o, slot) in acc.iter_mut().enumerate() {
                        let base = ((o * kh + ty) * kw + tx) * c;
                        *slot += w[base..base + c].iter().zip(px).map(|(a, b)| a * b).sum::<f64>();
                    }
                });
            }
            LinearKind::Depthwise => {
                let kw = self.kernel.1;
                self.for_each_tap(|pos, ty, tx, src| {
                    let taps = &w[(ty * kw + tx) * c..(ty * kw + tx + 1) * c];
                    let px = &x[src * c..(src + 1) * c];
                    let acc = &mut out[pos * c..(pos + 1) * c];
                    for ((slot, &t), &v) in acc.iter_mut().zip(taps).zip(px) {
                        *slot += t * v;
                    }
                });
            }
        }
        Ok(())
    }

    /// Accumulates parameter gradients (and the input gradient when asked)
    /// for upstream gradient `g` on the output.
    pub fn backward(
        &self,
        x: &[f64],
        w: &[f64],
        g: &[f64],
        mut gx: Option<&mut [f64]>,
        gw: &mut [f64],
        gb: &mut [f64],
    ) -> Result<()> {
        self.check(x, w, gb, g.len())?;
        if gw.len() != w.len() || gx.as_ref().is_some_and(|gx| gx.len() != x.len()) {
            return Err(Error::Shape("gradient buffers do not match the op".into()));
        }
        let c = self.input[2];
        let outs = self.channels();
        for chunk in g.chunks_exact(outs) {
            for (acc, v) in gb.iter_mut().zip(chunk) {
                *acc += v;
            }
        }
        match self.kind {
            LinearKind::Dense => {
                for (o, &go) in g.iter().enumerate() {
                    if go == 0.0 {
                        continue;
                    }
                    for (gw, &xi) in gw[o * c..(o + 1) * c].iter_mut().zip(x) {
                        *gw += go * xi;
                    }
                    if let Some(gx) = gx.as_deref_mut() {
                        for (gx, &wi) in gx.iter_mut().zip(&w[o * c..(o + 1) * c]) {
                            *gx += go * wi;
                        }
                    }
                }
            }
            LinearKind::Conv2d => {
                let (kh, kw) = self.kernel;
                self.for_each_tap(|pos, ty, tx, src| {
                    let px = &x[src * c..(src + 1) * c];
                    for o in 0..outs {
                        let go = g[pos * outs + o];
                        if go == 0.0 {
                            continue;
                        }
                        let base = ((o * kh + ty) * kw + tx) * c;
                        for (gw, &xi) in gw[base..base + c].iter_mut().zip(px) {
                            *gw += go * xi;
                        }
                        if let Some(gx) = gx.as_deref_mut() {
                            for (gx, &wi) in gx[src * c..(src + 1) * c].iter_mut().zip(&w[base..base + c]) {
                                *gx += go * wi;
                            }
                        }
                    }
                });
            }
            LinearKind::Depthwise => {
                let kw = self.kernel.1;
                self.for_each_tap(|pos, ty, tx, src| {
                    let t0 = (ty * kw + tx) * c;
                    for ch in 0..c {
                        let go = g[pos * c + ch];
                        gw[t0 + ch] += go * x[src * c + ch];
                        if let Some(gx) = gx.as_deref_mut() {
                            gx[src * c + ch] += go * w[t0 + ch];
                        }
                    }
                });
            }
        }
        Ok(())
    }

    /// Visits every in-bounds tap as `(output position, ty, tx, input position)`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize)) {
        let window = self.window.as_ref().expect("spatial op");
        let (oh, ow) = window.output();
        let (kh, kw) = self.kernel;
        let wd = self.input[1];
        for oy in 0..oh {
            for ox in 0..ow {
                let pos = oy * ow + ox;
                for ty in 0..kh {
                    let Some(iy) = window.rows.source(oy, ty) else { continue };
                    for tx in 0..kw {
                        if let Some(ix) = window.cols.source(ox, tx) {
                            f(pos, ty, tx, iy * wd + ix);
                        }
                    }
                }
            }
        }
    }
}

/// Non-overlapping window sums over an HWC item.
pub fn pool_sum(x: &[f64], shape: [usize; 3], window: (usize, usize)) -> Result<Vec<f64>> {
    let [h, w, c] = shape;
    let (ph, pw) = window;
    if ph == 0 || pw == 0 || h % ph != 0 || w % pw != 0 || x.len() != h * w * c {
        return Err(Error::Shape(format!("pool window {window:?} does not fit {shape:?}")));
    }
    let (oh, ow) = (h / ph, w / pw);
    let mut out = vec![0.0; oh * ow * c];
    for y in 0..h {
        for xx in 0..w {
            let dst = ((y / ph) * ow + xx / pw) * c;
            for ch in 0..c {
                out[dst + ch] += x[(y * w + xx) * c + ch];
            }
        }
    }
    Ok(out)
}

/// Gradient of [`pool_sum`]: each input receives its window's upstream value.
pub fn pool_sum_backward(g: &[f64], shape: [usize; 3], window: (usize, usize)) -> Vec<f64> {
    let [h, w, c] = shape;
    let (ph, pw) = window;
    let ow = w / pw;
    let mut gx = vec![0.0; h * w * c];
    for y in 0..h {
        for xx in 0..w {
            let src = ((y / ph) * ow + xx / pw) * c;
            gx[(y * w + xx) * c..(y * w + xx + 1) * c].copy_from_slice(&g[src..src + c]);
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lcg(seed: &mut u64) -> f64 {
        *seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        ((*seed >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
    }

    fn fill(n: usize, seed: &mut u64) -> Vec<f64> {
        (0..n).map(|_| lcg(seed)).collect()
    }

    #[test]
    fn conv_same_matches_hand_sum() {
        // 3x3 input, one channel, all-ones 3x3 kernel: the centre sees all nine taps.
        let op = LinearOp::conv2d([3, 3, 1], 1, (3, 3), (1, 1), Padding::Same).unwrap();
        let x: Vec<f64> = (1..=9).map(f64::from).collect();
        let mut out = vec![0.0; 9];
        op.forward(&x, &[1.0; 9], &[0.5], &mut out).unwrap();
        assert_eq!(out[4], 45.5);
        assert_eq!(out[0], 1.0 + 2.0 + 4.0 + 5.0 + 0.5);
    }

    /// Every op is linear in `(x, w, b)`, so `⟨g, f(x)⟩` differentiates exactly.
    fn check_gradients(op: &LinearOp) {
        let mut seed = 7;
        let x = fill(op.input_len(), &mut seed);
        let w = fill(op.weight_len(), &mut seed);
        let b = fill(op.channels(), &mut seed);
        let g = fill(op.output_len(), &mut seed);
        let mut gx = vec![0.0; x.len()];
        let mut gw = vec![0.0; w.len()];
        let mut gb = vec![0.0; b.len()];
        op.backward(&x, &w, &g, Some(&mut gx), &mut gw, &mut gb).unwrap();
        let loss = |x: &[f64], w: &[f64], b: &[f64]| {
            let mut out = vec![0.0; op.output_len()];
            op.forward(x, w, b, &mut out).unwrap();
            out.iter().zip(&g).map(|(a, b)| a * b).sum::<f64>()
        };
        let h = 1e-3;
        for (i, &expected) in gw.iter().enumerate() {
            let (mut up, mut down) = (w.clone(), w.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (loss(&x, &up, &b) - loss(&x, &down, &b)) / (2.0 * h);
            assert!((fd - expected).abs() < 1e-9, "w[{i}] {fd} vs {expected}");
        }
        for (i, &expected) in gx.iter().enumerate() {
            let (mut up, mut down) = (x.clone(), x.clone());
            up[i] += h;
            down[i] -= h;
            let fd = (loss(&up, &w, &b) - loss(&down, &w, &b)) / (2.0 * h);
            assert!((fd - expected).abs() < 1e-9, "x[{i}] {fd} vs {expected}");
        }
        let total: f64 = g.chunks_exact(op.channels()).map(|c| c[0]).sum();
        assert!((gb[0] - total).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences() {
        check_gradients(&LinearOp::dense(5, 3));
        check_gradients(&LinearOp::conv2d([5, 4, 2], 3, (3, 3), (1, 1), Padding::Same).unwrap());
        check_gradients(&LinearOp::conv2d([6, 5, 2], 2, (3, 2), (2, 2), Padding::Valid).unwrap());
        check_gradients(&LinearOp::depthwise([4, 5, 3], (3, 3), (2, 1), Padding::Same).unwrap());
    }

    #[test]
    fn pool_roundtrip() {
        let x: Vec<f64> = (0..16).map(f64::from).collect();
        let s = pool_sum(&x, [4, 4, 1], (2, 2)).unwrap();
        assert_eq!(s, vec![10.0, 18.0, 42.0, 50.0]);
        let g = pool_sum_backward(&[1.0, 2.0, 3.0, 4.0], [4, 4, 1], (2, 2));
        assert_eq!(&g[..4], &[1.0, 1.0, 2.0, 2.0]);
        assert!(pool_sum(&x, [4, 4, 1], (3, 3)).is_err());
    }
}
