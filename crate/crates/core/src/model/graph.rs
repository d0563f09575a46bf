//! Tape assembly for the training objective.
//!
//! Dense models batch every window of a chunk through one matrix pass;
//! recurrent models loop windows and concatenate their per-sample losses.
//! Either way the chunk ends in four `(B, 1)` columns — reconstruction
//! log-likelihood, the two KL terms, and the classifier cross-entropy —
//! combined into one summed loss node.

use super::train::{LossComponents, Objective};
use super::{DivadParts, DivadSpec, ModelError, Nets, NoisePair, PriorKind};
use crate::dataset::WindowSet;
use crate::networks::tape::{Grads, ParamStore, Tape, Var};
use crate::networks::{LN_2PI, STD_EPS};
use crate::par;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fixed chunk width for gradient accumulation. Chunks are mapped (in
/// parallel when enabled) and their partial sums combined in order, so
/// results do not depend on the thread count. 128 keeps the intermediate
/// activation blocks cache-sized — it measures faster single-threaded than
/// both narrower and wider chunks — while still splitting typical batches
/// into multiple parallel tasks.
pub(crate) const GRAD_CHUNK: usize = 128;

/// Per-row diagonal-Gaussian log density: `(B, 1)` column of
/// `sum_j log N(x_j; mean_j, std_j)`.
pub(crate) fn gaussian_logprob_rows<'p>(t: &mut Tape<'p>, x: Var, mean: Var, std: Var) -> Var {
    let diff = t.sub(x, mean);
    let rs = t.recip(std);
    let z = t.mul(diff, rs);
    let z2 = t.square(z);
    let half = t.scale(z2, -0.5);
    let ls = t.ln(std);
    let nls = t.neg(ls);
    let s = t.add(half, nls);
    let c = t.add_const(s, -0.5 * LN_2PI);
    t.sum_rows(c)
}

/// Closed-form `KL(N(mean, std^2) || N(0, I))` per row.
pub(crate) fn kl_std_rows<'p>(t: &mut Tape<'p>, mean: Var, std: Var) -> Var {
    let m2 = t.square(mean);
    let s2 = t.square(std);
    let ls = t.ln(std);
    let a = t.add(m2, s2);
    let b = t.scale(ls, -2.0);
    let c = t.add(a, b);
    let d = t.add_const(c, -1.0);
    let s = t.sum_rows(d);
    t.scale(s, 0.5)
}

/// Closed-form KL between two diagonal Gaussians per row.
fn kl_diag_rows<'p>(t: &mut Tape<'p>, mq: Var, sq: Var, mp: Var, sp: Var) -> Var {
    let lsp = t.ln(sp);
    let lsq = t.ln(sq);
    let dm = t.sub(mq, mp);
    let sq2 = t.square(sq);
    let dm2 = t.square(dm);
    let num = t.add(sq2, dm2);
    let sp2 = t.square(sp);
    let inv = t.recip(sp2);
    let fr = t.mul(num, inv);
    let fr2 = t.scale(fr, 0.5);
    let d1 = t.sub(lsp, lsq);
    let s1 = t.add(d1, fr2);
    let s2 = t.add_const(s1, -0.5);
    t.sum_rows(s2)
}

/// Log density of the learned mixture prior at each row of `z`, via
/// per-component columns and a row-wise log-sum-exp.
fn gm_logprob_rows<'p>(
    t: &mut Tape<'p>,
    gm: &super::GmIds,
    components: usize,
    z: Var,
) -> Var {
    let logits = t.param(gm.logits);
    let means = t.param(gm.means);
    let raws = t.param(gm.raw_stds);
    let lse_w = t.logsumexp(logits);
    let mut cols = Vec::with_capacity(components);
    for j in 0..components {
        let mu = t.rows(means, j, j + 1);
        let raw = t.rows(raws, j, j + 1);
        let sp = t.softplus(raw);
        let sd = t.add_const(sp, STD_EPS);
        let nmu = t.neg(mu);
        let centered = t.add_row(z, nmu);
        let rs = t.recip(sd);
        let zn = t.mul_row(centered, rs);
        let z2 = t.square(zn);
        let a = t.scale(z2, -0.5);
        let b = t.add_const(a, -0.5 * LN_2PI);
        let srows = t.sum_rows(b);
        let lsd = t.ln(sd);
        let sl = t.sum(lsd);
        let nsl = t.neg(sl);
        let c1 = t.add_scalar_node(srows, nsl);
        let lw = t.rows(logits, j, j + 1);
        let lw_norm = t.sub(lw, lse_w);
        cols.push(t.add_scalar_node(c1, lw_norm));
    }
    let mat = t.concat_cols(&cols);
    t.logsumexp_rows(mat)
}

struct RowLosses {
    recon: Var,
    kl_y: Var,
    kl_d: Var,
    ce: Var,
}

/// Everything downstream of the two encoder posteriors: sampling, the KL
/// terms, the classifier, and (through `decode`) the reconstruction term.
fn latent_losses<'p>(
    t: &mut Tape<'p>,
    parts: &DivadParts,
    prior: &PriorKind,
    (my, sy): (Var, Var),
    (md, sd): (Var, Var),
    noise_y: Array2<f64>,
    noise_d: Array2<f64>,
    onehot: Array2<f64>,
    decode: impl FnOnce(&mut Tape<'p>, Var) -> Var,
) -> RowLosses {
    let ny = t.input(noise_y);
    let nd = t.input(noise_d);
    let ey = t.mul(sy, ny);
    let z_y = t.add(my, ey);
    let ed = t.mul(sd, nd);
    let z_d = t.add(md, ed);

    let zcat = t.concat_cols(&[z_d, z_y]);
    let recon = decode(t, zcat);

    let kl_y = match prior {
        PriorKind::FixedGaussian => kl_std_rows(t, my, sy),
        PriorKind::LearnedGm { components } => {
            let logq = gaussian_logprob_rows(t, z_y, my, sy);
            let gm = parts.gm.as_ref().expect("mixture prior parameters");
            let logp = gm_logprob_rows(t, gm, *components, z_y);
            t.sub(logq, logp)
        }
    };

    let oh = t.input(onehot);
    let (mp, sp) = parts.prior_net.forward_gaussian_tape(t, oh);
    let kl_d = kl_diag_rows(t, md, sd, mp, sp);

    let zr = t.relu(z_d);
    let w = t.param(parts.clf.0);
    let b = t.param(parts.clf.1);
    let wz = t.matmul(zr, w);
    let logits = t.add_row(wz, b);
    let lse = t.logsumexp_rows(logits);
    let picked_mat = t.mul(logits, oh);
    let picked = t.sum_rows(picked_mat);
    let ce = t.sub(lse, picked);

    RowLosses {
        recon,
        kl_y,
        kl_d,
        ce,
    }
}

fn one_hot(rows: &[usize], n_dom: usize) -> Array2<f64> {
    let mut m = Array2::zeros((rows.len(), n_dom));
    for (r, &d) in rows.iter().enumerate() {
        m[[r, d]] = 1.0;
    }
    m
}

fn noise_matrix(rows: &[&[f64]]) -> Array2<f64> {
    let cols = rows.first().map_or(0, |r| r.len());
    Array2::from_shape_fn((rows.len(), cols), |(r, c)| rows[r][c])
}

fn flatten_window(w: &Array2<f64>) -> Vec<f64> {
    w.iter().cloned().collect()
}

/// One sample of a training chunk: a window index plus its fixed noise.
struct Sample {
    idx: usize,
    noise: NoisePair,
}

enum DataRef<'a> {
    /// Row-flattened windows, one row per window.
    Dense(Array2<f64>),
    Recurrent(&'a [Array2<f64>]),
}

/// The training objective over a fixed window set: mean of
/// `-recon + beta * (kl_y + kl_d) + alpha_d * ce`.
pub(crate) struct DivadObjective<'a> {
    parts: &'a DivadParts,
    spec: &'a DivadSpec,
    n_dom: usize,
    data: DataRef<'a>,
    d_idx: Vec<usize>,
    beta: f64,
    alpha_d: f64,
}

impl<'a> DivadObjective<'a> {
    /// `domains` must be the model's sorted domain vocabulary; every
    /// window's domain id must appear in it.
    pub fn new(
        parts: &'a DivadParts,
        spec: &'a DivadSpec,
        ws: &'a WindowSet,
        domains: &[u32],
        beta: f64,
        alpha_d: f64,
    ) -> Result<Self, ModelError> {
        if ws.is_empty() {
            return Err(ModelError::Empty);
        }
        if ws.window_len != spec.window_len || ws.n_features != spec.n_features {
            return Err(ModelError::BadConfig(format!(
                "window set is {}x{} but the model expects {}x{}",
                ws.window_len, ws.n_features, spec.window_len, spec.n_features
            )));
        }
        let d_idx = ws
            .domain_ids
            .iter()
            .map(|id| {
                domains
                    .binary_search(id)
                    .map_err(|_| ModelError::BadConfig(format!("unknown domain id {id}")))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let data = match spec.arch {
            super::ArchKind::Dense { .. } => {
                let flat = spec.window_len * spec.n_features;
                let mut x = Array2::zeros((ws.len(), flat));
                for (r, w) in ws.windows.iter().enumerate() {
                    for (c, v) in w.iter().enumerate() {
                        x[[r, c]] = *v;
                    }
                }
                DataRef::Dense(x)
            }
            super::ArchKind::Recurrent { .. } => DataRef::Recurrent(&ws.windows),
        };
        Ok(Self {
            parts,
            spec,
            n_dom: domains.len(),
            data,
            d_idx,
            beta,
            alpha_d,
        })
    }

    /// Builds the chunk graph and returns the summed loss plus component
    /// sums, optionally with gradients of the summed loss.
    fn chunk_eval(
        &self,
        params: &ParamStore,
        chunk: &[Sample],
        want_grads: bool,
    ) -> (f64, LossComponents, Option<Grads>) {
        let mut t = Tape::new(params);
        let d_rows: Vec<usize> = chunk.iter().map(|s| self.d_idx[s.idx]).collect();
        let onehot = one_hot(&d_rows, self.n_dom);
        let ny = noise_matrix(&chunk.iter().map(|s| s.noise.y.as_slice()).collect::<Vec<_>>());
        let nd = noise_matrix(&chunk.iter().map(|s| s.noise.d.as_slice()).collect::<Vec<_>>());

        let rows = match (&self.parts.nets, &self.data) {
            (Nets::Dense { enc_y, enc_d, dec }, DataRef::Dense(x)) => {
                let mut xb = Array2::zeros((chunk.len(), x.ncols()));
                for (r, s) in chunk.iter().enumerate() {
                    xb.row_mut(r).assign(&x.row(s.idx));
                }
                let xv = t.input(xb);
                let y_out = enc_y.forward_gaussian_tape(&mut t, xv);
                let d_out = enc_d.forward_gaussian_tape(&mut t, xv);
                latent_losses(
                    &mut t,
                    self.parts,
                    &self.spec.prior,
                    y_out,
                    d_out,
                    ny,
                    nd,
                    onehot,
                    |t, zcat| {
                        let (mx, sx) = dec.forward_gaussian_tape(t, zcat);
                        gaussian_logprob_rows(t, xv, mx, sx)
                    },
                )
            }
            (Nets::Recurrent { enc_y, enc_d, dec }, DataRef::Recurrent(windows)) => {
                let mut recon = Vec::with_capacity(chunk.len());
                let mut kl_y = Vec::with_capacity(chunk.len());
                let mut kl_d = Vec::with_capacity(chunk.len());
                let mut ce = Vec::with_capacity(chunk.len());
                for (r, s) in chunk.iter().enumerate() {
                    let xv = t.input(windows[s.idx].clone());
                    let y_out = enc_y.forward_tape(&mut t, xv);
                    let d_out = enc_d.forward_tape(&mut t, xv);
                    let rl = latent_losses(
                        &mut t,
                        self.parts,
                        &self.spec.prior,
                        y_out,
                        d_out,
                        ny.row(r).insert_axis(ndarray::Axis(0)).to_owned(),
                        nd.row(r).insert_axis(ndarray::Axis(0)).to_owned(),
                        onehot.row(r).insert_axis(ndarray::Axis(0)).to_owned(),
                        |t, zcat| {
                            let (mx, sx) = dec.forward_tape(t, zcat);
                            let lp = gaussian_logprob_rows(t, xv, mx, sx);
                            t.sum(lp)
                        },
                    );
                    recon.push(rl.recon);
                    kl_y.push(rl.kl_y);
                    kl_d.push(rl.kl_d);
                    ce.push(rl.ce);
                }
                RowLosses {
                    recon: t.concat_rows(&recon),
                    kl_y: t.concat_rows(&kl_y),
                    kl_d: t.concat_rows(&kl_d),
                    ce: t.concat_rows(&ce),
                }
            }
            _ => unreachable!("architecture and data layout always agree"),
        };

        let nrec = t.neg(rows.recon);
        let wy = t.scale(rows.kl_y, self.beta);
        let wd = t.scale(rows.kl_d, self.beta);
        let wc = t.scale(rows.ce, self.alpha_d);
        let a = t.add(nrec, wy);
        let b = t.add(a, wd);
        let per_row = t.add(b, wc);
        let sum_loss = t.sum(per_row);

        let grads = if want_grads {
            let mut g = Grads::zeros_like(params);
            t.backward(sum_loss, &mut g);
            Some(g)
        } else {
            None
        };

        let sums = LossComponents {
            recon: column_sum(&t, rows.recon),
            kl_y: column_sum(&t, rows.kl_y),
            kl_d: column_sum(&t, rows.kl_d),
            ce: column_sum(&t, rows.ce),
        };
        (t.scalar(sum_loss), sums, grads)
    }
}

fn column_sum(t: &Tape<'_>, v: Var) -> f64 {
    t.value(v).iter().sum()
}

impl Objective for DivadObjective<'_> {
    fn eval(
        &self,
        params: &ParamStore,
        idx: &[usize],
        noise_key: u64,
        grads: Option<&mut Grads>,
    ) -> Result<(f64, LossComponents), ModelError> {
        if idx.is_empty() {
            return Err(ModelError::Empty);
        }
        let mp = self.spec.encoding_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_key);
        let samples: Vec<Sample> = idx
            .iter()
            .map(|&i| Sample {
                idx: i,
                noise: NoisePair::standard(mp, &mut rng),
            })
            .collect();
        let want = grads.is_some();
        let parts = par::map_chunks(&samples, GRAD_CHUNK, |c| self.chunk_eval(params, c, want));
        let n = idx.len() as f64;
        let mut loss = 0.0;
        let mut comps = LossComponents::default();
        let mut acc: Option<Grads> = None;
        for (l, c, g) in parts {
            loss += l;
            comps.recon += c.recon;
            comps.kl_y += c.kl_y;
            comps.kl_d += c.kl_d;
            comps.ce += c.ce;
            if let Some(g) = g {
                match &mut acc {
                    None => acc = Some(g),
                    Some(a) => a.add_assign(&g),
                }
            }
        }
        if let (Some(out), Some(mut a)) = (grads, acc) {
            a.scale(1.0 / n);
            out.add_assign(&a);
        }
        comps.recon /= n;
        comps.kl_y /= n;
        comps.kl_d /= n;
        comps.ce /= n;
        Ok((loss / n, comps))
    }
}

/// Component values for one window under fixed noise.
pub(crate) struct SampleValues {
    pub recon: f64,
    pub kl_y: f64,
    pub kl_d: f64,
    pub ce: f64,
}

pub(crate) fn sample_values(
    parts: &DivadParts,
    spec: &DivadSpec,
    n_dom: usize,
    params: &ParamStore,
    x: &Array2<f64>,
    d: usize,
    noise: &NoisePair,
) -> SampleValues {
    let mut t = Tape::new(params);
    let onehot = one_hot(&[d], n_dom);
    let ny = noise_matrix(&[noise.y.as_slice()]);
    let nd = noise_matrix(&[noise.d.as_slice()]);
    let rows = match &parts.nets {
        Nets::Dense { enc_y, enc_d, dec } => {
            let flat = noise_matrix(&[flatten_window(x).as_slice()]);
            let xv = t.input(flat);
            let y_out = enc_y.forward_gaussian_tape(&mut t, xv);
            let d_out = enc_d.forward_gaussian_tape(&mut t, xv);
            latent_losses(&mut t, parts, &spec.prior, y_out, d_out, ny, nd, onehot, |t, zcat| {
                let (mx, sx) = dec.forward_gaussian_tape(t, zcat);
                gaussian_logprob_rows(t, xv, mx, sx)
            })
        }
        Nets::Recurrent { enc_y, enc_d, dec } => {
            let xv = t.input(x.clone());
            let y_out = enc_y.forward_tape(&mut t, xv);
            let d_out = enc_d.forward_tape(&mut t, xv);
            latent_losses(&mut t, parts, &spec.prior, y_out, d_out, ny, nd, onehot, |t, zcat| {
                let (mx, sx) = dec.forward_tape(t, zcat);
                let lp = gaussian_logprob_rows(t, xv, mx, sx);
                t.sum(lp)
            })
        }
    };
    SampleValues {
        recon: t.scalar(rows.recon),
        kl_y: t.scalar(rows.kl_y),
        kl_d: t.scalar(rows.kl_d),
        ce: t.scalar(rows.ce),
    }
}
