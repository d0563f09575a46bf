//! Recurrent window stacks: a 1-D convolution over time feeding a gated
//! recurrent layer.
//!
//! The encoder convolves an `L x M` window into `L'` feature frames, runs a
//! GRU over them, and maps the last hidden state to a Gaussian head. The
//! decoder mirrors it: the latent vector is fed to a GRU at every one of the
//! `L'` steps, and a transposed convolution (overlap-add of per-step kernel
//! contributions) restores per-record Gaussian parameters over the full
//! `L x M` window.

use super::tape::{ParamId, ParamStore, Tape, Var};
use super::{NetworkError, STD_EPS};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentEncoderSpec {
    pub window_len: usize,
    pub in_features: usize,
    pub conv_filters: usize,
    pub kernel: usize,
    pub stride: usize,
    pub gru_units: usize,
    pub encoding_dim: usize,
}

impl RecurrentEncoderSpec {
    pub fn latent_len(&self) -> usize {
        (self.window_len - self.kernel) / self.stride + 1
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.window_len == 0
            || self.in_features == 0
            || self.conv_filters == 0
            || self.kernel == 0
            || self.stride == 0
            || self.gru_units == 0
            || self.encoding_dim == 0
        {
            return Err(NetworkError::BadConfig(
                "recurrent encoder dims must be positive".into(),
            ));
        }
        if self.kernel > self.window_len {
            return Err(NetworkError::BadConfig(format!(
                "kernel {} exceeds window length {}",
                self.kernel, self.window_len
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecurrentDecoderSpec {
    pub window_len: usize,
    pub out_features: usize,
    pub latent_dim: usize,
    pub kernel: usize,
    pub stride: usize,
    pub gru_units: usize,
}

impl RecurrentDecoderSpec {
    pub fn latent_len(&self) -> usize {
        (self.window_len - self.kernel) / self.stride + 1
    }

    pub fn validate(&self) -> Result<(), NetworkError> {
        if self.window_len == 0
            || self.out_features == 0
            || self.latent_dim == 0
            || self.kernel == 0
            || self.stride == 0
            || self.gru_units == 0
        {
            return Err(NetworkError::BadConfig(
                "recurrent decoder dims must be positive".into(),
            ));
        }
        if self.kernel > self.window_len {
            return Err(NetworkError::BadConfig(format!(
                "kernel {} exceeds window length {}",
                self.kernel, self.window_len
            )));
        }
        // The overlap-add must land exactly on the window length.
        let lp = self.latent_len();
        if (lp - 1) * self.stride + self.kernel != self.window_len {
            return Err(NetworkError::BadConfig(format!(
                "kernel {} / stride {} cannot restore window length {}",
                self.kernel, self.stride, self.window_len
            )));
        }
        Ok(())
    }
}

/// One gated recurrent layer; weights are `in x units` so steps run on row
/// states.
#[derive(Debug, Clone)]
struct Gru {
    wxr: ParamId,
    whr: ParamId,
    br: ParamId,
    wxz: ParamId,
    whz: ParamId,
    bz: ParamId,
    wxn: ParamId,
    bxn: ParamId,
    whn: ParamId,
    bhn: ParamId,
    units: usize,
}

impl Gru {
    fn init(
        store: &mut ParamStore,
        prefix: &str,
        in_dim: usize,
        units: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let (wxr, br) = store.register_linear(&format!("{prefix}.xr"), in_dim, units, rng);
        let (whr, _) = store.register_linear(&format!("{prefix}.hr"), units, units, rng);
        let (wxz, bz) = store.register_linear(&format!("{prefix}.xz"), in_dim, units, rng);
        let (whz, _) = store.register_linear(&format!("{prefix}.hz"), units, units, rng);
        let (wxn, bxn) = store.register_linear(&format!("{prefix}.xn"), in_dim, units, rng);
        let (whn, bhn) = store.register_linear(&format!("{prefix}.hn"), units, units, rng);
        Self {
            wxr,
            whr,
            br,
            wxz,
            whz,
            bz,
            wxn,
            bxn,
            whn,
            bhn,
            units,
        }
    }

    /// `r = sig(xWxr + hWhr + br)`, `z = sig(xWxz + hWhz + bz)`,
    /// `n = tanh(xWxn + bxn + r*(hWhn + bhn))`, `h' = n + z*(h - n)`.
    fn step(&self, t: &mut Tape, x: Var, h: Var) -> Var {
        let gate = |t: &mut Tape, wx, wh, b| {
            let wxv = t.param(wx);
            let whv = t.param(wh);
            let bv = t.param(b);
            let xi = t.matmul(x, wxv);
            let hi = t.matmul(h, whv);
            let s = t.add(xi, hi);
            t.add_row(s, bv)
        };
        let r_pre = gate(t, self.wxr, self.whr, self.br);
        let r = t.sigmoid(r_pre);
        let z_pre = gate(t, self.wxz, self.whz, self.bz);
        let z = t.sigmoid(z_pre);

        let wxn = t.param(self.wxn);
        let bxn = t.param(self.bxn);
        let whn = t.param(self.whn);
        let bhn = t.param(self.bhn);
        let xn = t.matmul(x, wxn);
        let xn = t.add_row(xn, bxn);
        let hn = t.matmul(h, whn);
        let hn = t.add_row(hn, bhn);
        let gated = t.mul(r, hn);
        let n_pre = t.add(xn, gated);
        let n = t.tanh(n_pre);

        let diff = t.sub(h, n);
        let zdiff = t.mul(z, diff);
        t.add(n, zdiff)
    }
}

/// Convolution + GRU + Gaussian head over the last step.
#[derive(Debug, Clone)]
pub struct RecurrentEncoder {
    spec: RecurrentEncoderSpec,
    conv_w: ParamId,
    conv_b: ParamId,
    gru: Gru,
    mean_w: ParamId,
    mean_b: ParamId,
    std_w: ParamId,
    std_b: ParamId,
}

impl RecurrentEncoder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        spec: RecurrentEncoderSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NetworkError> {
        spec.validate()?;
        let (conv_w, conv_b) = store.register_linear(
            &format!("{prefix}.conv"),
            spec.kernel * spec.in_features,
            spec.conv_filters,
            rng,
        );
        let gru = Gru::init(
            store,
            &format!("{prefix}.gru"),
            spec.conv_filters,
            spec.gru_units,
            rng,
        );
        let (mean_w, mean_b) =
            store.register_linear(&format!("{prefix}.mean"), spec.gru_units, spec.encoding_dim, rng);
        let (std_w, std_b) =
            store.register_linear(&format!("{prefix}.std"), spec.gru_units, spec.encoding_dim, rng);
        Ok(Self {
            spec,
            conv_w,
            conv_b,
            gru,
            mean_w,
            mean_b,
            std_w,
            std_b,
        })
    }

    pub fn spec(&self) -> &RecurrentEncoderSpec {
        &self.spec
    }

    /// Encodes an `L x M` window node into `(mean, std)` rows of the
    /// encoding dimension.
    pub fn forward_tape(&self, t: &mut Tape, window: Var) -> (Var, Var) {
        debug_assert_eq!(
            t.shape(window),
            (self.spec.window_len, self.spec.in_features)
        );
        let patches = t.gather_patches(window, self.spec.kernel, self.spec.stride);
        let cw = t.param(self.conv_w);
        let cb = t.param(self.conv_b);
        let conv = t.matmul(patches, cw);
        let conv = t.add_row(conv, cb);
        let conv = t.relu(conv);

        let lp = self.spec.latent_len();
        let mut h = t.input(ndarray::Array2::zeros((1, self.gru.units)));
        for step in 0..lp {
            let x = t.rows(conv, step, step + 1);
            h = self.gru.step(t, x, h);
        }

        let mw = t.param(self.mean_w);
        let mb = t.param(self.mean_b);
        let mean = t.matmul(h, mw);
        let mean = t.add_row(mean, mb);
        let sw = t.param(self.std_w);
        let sb = t.param(self.std_b);
        let pre = t.matmul(h, sw);
        let pre = t.add_row(pre, sb);
        let sp = t.softplus(pre);
        let std = t.add_const(sp, STD_EPS);
        (mean, std)
    }
}

/// Repeat-vector + GRU over all steps + transposed convolution restoring a
/// per-record Gaussian head over the `L x M` window.
#[derive(Debug, Clone)]
pub struct RecurrentDecoder {
    spec: RecurrentDecoderSpec,
    gru: Gru,
    mean_w: ParamId,
    mean_b: ParamId,
    std_w: ParamId,
    std_b: ParamId,
}

impl RecurrentDecoder {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        spec: RecurrentDecoderSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NetworkError> {
        spec.validate()?;
        let gru = Gru::init(
            store,
            &format!("{prefix}.gru"),
            spec.latent_dim,
            spec.gru_units,
            rng,
        );
        // Transposed-conv heads: weights project GRU states to kernel-wide
        // patches; the bias is per output feature, added once per record
        // after overlap-add.
        let patch = spec.kernel * spec.out_features;
        let bound = 1.0 / (spec.gru_units as f64).sqrt();
        let head = |store: &mut ParamStore, rng: &mut ChaCha8Rng, tag: &str| {
            let w = Array2::from_shape_fn((spec.gru_units, patch), |_| {
                rng.random_range(-bound..bound)
            });
            let wid = store.register(format!("{prefix}.{tag}.w"), w);
            let bid = store.register(
                format!("{prefix}.{tag}.b"),
                Array2::zeros((1, spec.out_features)),
            );
            (wid, bid)
        };
        let (mean_w, mean_b) = head(store, rng, "mean");
        let (std_w, std_b) = head(store, rng, "std");
        Ok(Self {
            spec,
            gru,
            mean_w,
            mean_b,
            std_w,
            std_b,
        })
    }

    pub fn spec(&self) -> &RecurrentDecoderSpec {
        &self.spec
    }

    /// Decodes a `1 x latent_dim` row into `(mean, std)` matrices of shape
    /// `L x M`.
    pub fn forward_tape(&self, t: &mut Tape, z: Var) -> (Var, Var) {
        debug_assert_eq!(t.shape(z), (1, self.spec.latent_dim));
        let lp = self.spec.latent_len();
        let mut h = t.input(ndarray::Array2::zeros((1, self.gru.units)));
        let mut states = Vec::with_capacity(lp);
        for _ in 0..lp {
            // Repeat-vector: the same latent row feeds every step.
            h = self.gru.step(t, z, h);
            states.push(h);
        }
        let hs = t.concat_rows(&states);

        let head = |t: &mut Tape, w, b| {
            let wv = t.param(w);
            let spread = t.matmul(hs, wv);
            let out = t.scatter_patches(
                spread,
                self.spec.kernel,
                self.spec.stride,
                self.spec.window_len,
            );
            let bv = t.param(b);
            t.add_row(out, bv)
        };
        let mean = head(t, self.mean_w, self.mean_b);
        let pre = head(t, self.std_w, self.std_b);
        let sp = t.softplus(pre);
        let std = t.add_const(sp, STD_EPS);
        (mean, std)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::networks::tape::Grads;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};

    fn enc_spec() -> RecurrentEncoderSpec {
        RecurrentEncoderSpec {
            window_len: 20,
            in_features: 3,
            conv_filters: 6,
            kernel: 5,
            stride: 1,
            gru_units: 4,
            encoding_dim: 2,
        }
    }

    #[test]
    fn encoder_decoder_round_trip_shapes() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        let enc = RecurrentEncoder::init(&mut store, "enc", enc_spec(), &mut rng).unwrap();
        let dec = RecurrentDecoder::init(
            &mut store,
            "dec",
            RecurrentDecoderSpec {
                window_len: 20,
                out_features: 3,
                latent_dim: 2,
                kernel: 5,
                stride: 1,
                gru_units: 4,
            },
            &mut rng,
        )
        .unwrap();
        assert_eq!(enc.spec().latent_len(), 16);
        assert_eq!(dec.spec().latent_len(), 16);

        let window = Array2::from_shape_fn((20, 3), |(i, j)| (i as f64 * 0.1).sin() + j as f64);
        let mut t = Tape::new(&store);
        let w = t.input(window);
        let (mean, std) = enc.forward_tape(&mut t, w);
        assert_eq!(t.shape(mean), (1, 2));
        assert_eq!(t.shape(std), (1, 2));
        assert!(t.value(std).iter().all(|&s| s >= STD_EPS));

        let (rm, rs) = dec.forward_tape(&mut t, mean);
        assert_eq!(t.shape(rm), (20, 3));
        assert_eq!(t.shape(rs), (20, 3));
        assert!(t.value(rs).iter().all(|&s| s >= STD_EPS));
    }

    #[test]
    fn stride_that_cannot_restore_length_is_rejected() {
        let spec = RecurrentDecoderSpec {
            window_len: 10,
            out_features: 2,
            latent_dim: 2,
            kernel: 3,
            stride: 2,
            gru_units: 4,
        };
        // (10-3)/2+1 = 4 steps; (4-1)*2+3 = 9 != 10.
        assert!(spec.validate().is_err());
    }

    #[test]
    fn oversized_kernel_is_rejected() {
        let mut bad = enc_spec();
        bad.kernel = 21;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn recurrent_autoencoder_gradients_match_finite_differences() {
        // Tiny net: reconstruction loss through conv -> GRU -> repeat ->
        // GRU -> transposed conv.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::new();
        let enc = RecurrentEncoder::init(
            &mut store,
            "enc",
            RecurrentEncoderSpec {
                window_len: 4,
                in_features: 1,
                conv_filters: 1,
                kernel: 2,
                stride: 1,
                gru_units: 1,
                encoding_dim: 1,
            },
            &mut rng,
        )
        .unwrap();
        let dec = RecurrentDecoder::init(
            &mut store,
            "dec",
            RecurrentDecoderSpec {
                window_len: 4,
                out_features: 1,
                latent_dim: 1,
                kernel: 2,
                stride: 1,
                gru_units: 1,
            },
            &mut rng,
        )
        .unwrap();
        let window = Array2::from_shape_fn((4, 1), |(i, _)| (i as f64 - 1.5) * 0.4);

        let loss_fn = |p: &ParamStore, grads: Option<&mut Grads>| {
            let mut t = Tape::new(p);
            let w = t.input(window.clone());
            let (mean, _std) = enc.forward_tape(&mut t, w);
            let (rm, rs) = dec.forward_tape(&mut t, mean);
            // Gaussian negative log likelihood of the window.
            let diff = t.sub(rm, w);
            let d2 = t.square(diff);
            let s2 = t.square(rs);
            let inv = t.recip(s2);
            let quad = t.mul(d2, inv);
            let qsum = t.sum(quad);
            let lns = t.ln(rs);
            let lsum = t.sum(lns);
            let half = t.scale(qsum, 0.5);
            let loss = t.add(half, lsum);
            let loss_val = t.scalar(loss);
            if let Some(g) = grads {
                t.backward(loss, g);
            }
            loss_val
        };

        let report = crate::networks::gradient_check(&mut store, 1e-4, loss_fn).unwrap();
        assert!(report.ok, "max rel error {}", report.max_rel_error);
    }

    #[test]
    fn encoder_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let enc = RecurrentEncoder::init(&mut store, "e", enc_spec(), &mut rng).unwrap();
        let window = Array2::from_shape_fn((20, 3), |(i, j)| {
            ((i * 7 + j * 3) as f64 * 0.37).cos()
        });
        let run = || {
            let mut t = Tape::new(&store);
            let w = t.input(window.clone());
            let (mean, std) = enc.forward_tape(&mut t, w);
            (t.value(mean).clone(), t.value(std).clone())
        };
        let (m1, s1) = run();
        let (m2, s2) = run();
        assert_eq!(m1, m2);
        assert_eq!(s1, s2);
        let mut other = ChaCha8Rng::seed_from_u64(1);
        let x: f64 = other.random_range(-1.0..1.0);
        assert!(x.is_finite());
    }
}
