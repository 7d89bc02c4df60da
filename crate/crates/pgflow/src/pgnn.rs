//! Learned power-flow solvers: an MLP encoder from solver inputs to bus
//! voltages, physics-encoding decoders (MLP, bilinear, topology-pruned
//! bilinear) that reconstruct power injections from the predicted voltages,
//! joint training of both under a weighted two-term loss, and the linear
//! regression and encoder-only baselines.
//!
//! The encoder works in z-scored space; its output is de-normalized through a
//! differentiable affine step before entering the decoder, so decoder weights
//! live in physical per-unit terms and the bilinear decoder can be compared
//! directly against the bus admittance matrices.

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
#[cfg(test)]
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::data::{Dataset, NormRecord};
use crate::linalg;
use crate::nn::{Adam, DenseCache, DenseGrads, Mlp, Moments, VecMoments};
use crate::nn::sq_loss;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("loss diverged at epoch {epoch}: {loss}")]
    DivergedLoss { epoch: usize, loss: f64 },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("pruned weight off the adjacency pattern at ({row}, {col}): {value}")]
    MaskViolation { row: usize, col: usize, value: f64 },
    #[error("normal equations singular even at ridge strength {lambda}")]
    SingularRegression { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum DecoderKind {
    Mlp,
    Bnn,
    Tpbnn,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub encoder_hidden: Vec<usize>,
    pub decoder_hidden: Vec<usize>,
    pub alpha_sup: f64,
    pub alpha_unsup: f64,
    pub lr: f64,
    /// Learning rate for decoder parameters. Decoders start from a
    /// closed-form least-squares fit, so joint training normally keeps them
    /// frozen (`0.0`); a positive rate lets the optimizer move them.
    pub decoder_lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            encoder_hidden: vec![128, 128],
            decoder_hidden: vec![128],
            alpha_sup: 1.0,
            alpha_unsup: 0.1,
            lr: 1e-3,
            decoder_lr: 1e-3,
            batch_size: 32,
            max_epochs: 2000,
            patience: 50,
            seed: 0,
        }
    }
}

/// Independent deterministic RNG streams derived from the run seed, so that
/// adding or removing one consumer (e.g. a decoder) cannot shift another's
/// draws.
fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x0100_0000_01b3).wrapping_add(stream))
}

const STREAM_ENCODER: u64 = 0;
const STREAM_DECODER: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;

/// Two dense stacks sharing the voltage input; one predicts real injections,
/// the other reactive.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MlpDecoder {
    pub p_branch: Mlp,
    pub q_branch: Mlp,
}

/// Bilinear decoder. For each sample with voltage components (mu, omega):
///
/// ```text
/// S1 = (mu mu' + om om') o W_G + (om mu' - mu om') o W_B
/// S2 = (om mu' - mu om') o W_G - (mu mu' + om om') o W_B
/// y_p = S1 1 + b_p,   y_q = S2 1 + b_q
/// ```
///
/// With `W_G = G` and `W_B = B` this reproduces the rectangular power-flow
/// equations exactly. A pruned decoder carries the adjacency mask; masked
/// weight entries stay at zero because their gradients are zeroed.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct Bnn {
    pub w_g: DMatrix<f64>,
    pub w_b: DMatrix<f64>,
    pub b_p: DVector<f64>,
    pub b_q: DVector<f64>,
    pub mask: Option<DMatrix<f64>>,
}

impl Bnn {
    /// Zero-initialized decoder; with a mask this is the pruned variant.
    pub fn new(n: usize, mask: Option<DMatrix<f64>>) -> Self {
        if let Some(a) = &mask {
            assert_eq!(a.shape(), (n, n), "mask shape mismatch");
        }
        Bnn {
            w_g: DMatrix::zeros(n, n),
            w_b: DMatrix::zeros(n, n),
            b_p: DVector::zeros(n),
            b_q: DVector::zeros(n),
            mask,
        }
    }

    pub fn n(&self) -> usize {
        self.w_g.nrows()
    }

    /// Verifies that no weight lives off the adjacency pattern.
    pub fn check_mask(&self) -> Result<(), TrainError> {
        if let Some(a) = &self.mask {
            for i in 0..self.n() {
                for k in 0..self.n() {
                    if a[(i, k)] == 0.0 && (self.w_g[(i, k)] != 0.0 || self.w_b[(i, k)] != 0.0) {
                        let value = if self.w_g[(i, k)] != 0.0 {
                            self.w_g[(i, k)]
                        } else {
                            self.w_b[(i, k)]
                        };
                        return Err(TrainError::MaskViolation { row: i, col: k, value });
                    }
                }
            }
        }
        Ok(())
    }

    /// Closed-form ridge fit of the bilinear decoder to (voltage, injection)
    /// pairs. The outputs are linear in the weights, so each row of `W_G`,
    /// `W_B` and its two biases solve an independent least-squares problem
    /// over that row's active columns (all columns, or the adjacency support
    /// when a mask is given). If the normal equations are singular the ridge
    /// strength is raised by 100x, a few times, before giving up.
    pub fn fit_least_squares(
        mu: &DMatrix<f64>,
        om: &DMatrix<f64>,
        p: &DMatrix<f64>,
        q: &DMatrix<f64>,
        mask: Option<&DMatrix<f64>>,
        lambda: f64,
    ) -> Result<Self, TrainError> {
        let n = mu.nrows();
        let m = mu.ncols();
        assert!(m >= 2, "need at least two samples");
        assert_eq!(om.shape(), (n, m), "omega shape mismatch");
        assert_eq!(p.shape(), (n, m), "p shape mismatch");
        assert_eq!(q.shape(), (n, m), "q shape mismatch");
        let mut out = Bnn::new(n, mask.cloned());
        for i in 0..n {
            let cols: Vec<usize> = match mask {
                Some(a) => (0..n).filter(|&k| a[(i, k)] != 0.0).collect(),
                None => (0..n).collect(),
            };
            let c = cols.len();
            // Stacked design: one P equation and one Q equation per sample.
            // For column k the P equation has coefficient a = mu_i mu_k +
            // om_i om_k on W_G[i,k] and c = om_i mu_k - mu_i om_k on
            // W_B[i,k]; the Q equation has c on W_G[i,k] and -a on W_B[i,k].
            let mut f = DMatrix::zeros(2 * m, 2 * c + 2);
            let mut y = DVector::zeros(2 * m);
            for t in 0..m {
                for (j, &k) in cols.iter().enumerate() {
                    let a = mu[(i, t)] * mu[(k, t)] + om[(i, t)] * om[(k, t)];
                    let cc = om[(i, t)] * mu[(k, t)] - mu[(i, t)] * om[(k, t)];
                    f[(t, j)] = a;
                    f[(t, c + j)] = cc;
                    f[(m + t, j)] = cc;
                    f[(m + t, c + j)] = -a;
                }
                f[(t, 2 * c)] = 1.0;
                f[(m + t, 2 * c + 1)] = 1.0;
                y[t] = p[(i, t)];
                y[m + t] = q[(i, t)];
            }
            let gram = f.transpose() * &f;
            let rhs = f.transpose() * &y;
            let mut lam = lambda;
            let mut solved = None;
            for _ in 0..4 {
                let mut reg = gram.clone();
                for d in 0..2 * c + 2 {
                    reg[(d, d)] += lam;
                }
                if let Ok(w) = linalg::lu_solve(&reg, &rhs) {
                    solved = Some(w);
                    break;
                }
                lam *= 100.0;
            }
            let w = solved.ok_or(TrainError::SingularRegression { lambda: lam })?;
            for (j, &k) in cols.iter().enumerate() {
                out.w_g[(i, k)] = w[j];
                out.w_b[(i, k)] = w[c + j];
            }
            out.b_p[i] = w[2 * c];
            out.b_q[i] = w[2 * c + 1];
        }
        Ok(out)
    }
}

/// Forward cache of the bilinear decoder: the voltage blocks and the four
/// weight-times-voltage products reused by the backward pass.
#[derive(Debug, Clone)]
pub struct BnnCache {
    mu: DMatrix<f64>,
    om: DMatrix<f64>,
    gm: DMatrix<f64>,
    go: DMatrix<f64>,
    bm: DMatrix<f64>,
    bo: DMatrix<f64>,
}

/// Gradients of the bilinear decoder parameters.
#[derive(Debug, Clone)]
pub struct BnnGrads {
    pub dw_g: DMatrix<f64>,
    pub dw_b: DMatrix<f64>,
    pub db_p: DVector<f64>,
    pub db_q: DVector<f64>,
}

impl Bnn {
    /// Batched forward on voltage blocks of shape `(N, batch)`.
    pub fn forward(&self, mu: &DMatrix<f64>, om: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>, BnnCache) {
        let n = self.n();
        assert_eq!(mu.nrows(), n, "mu dimension mismatch");
        assert_eq!(om.nrows(), n, "omega dimension mismatch");
        let gm = &self.w_g * mu;
        let go = &self.w_g * om;
        let bm = &self.w_b * mu;
        let bo = &self.w_b * om;
        let mut y_p = mu.component_mul(&gm) + om.component_mul(&go) + om.component_mul(&bm)
            - mu.component_mul(&bo);
        let mut y_q = om.component_mul(&gm) - mu.component_mul(&go) - mu.component_mul(&bm)
            - om.component_mul(&bo);
        for b in 0..mu.ncols() {
            let mut cp = y_p.column_mut(b);
            cp += &self.b_p;
            let mut cq = y_q.column_mut(b);
            cq += &self.b_q;
        }
        let cache = BnnCache { mu: mu.clone(), om: om.clone(), gm, go, bm, bo };
        (y_p, y_q, cache)
    }

    /// Backward pass; returns parameter gradients (mask already applied for
    /// the pruned variant) and gradients with respect to (mu, omega).
    pub fn backward(
        &self,
        cache: &BnnCache,
        g_p: &DMatrix<f64>,
        g_q: &DMatrix<f64>,
    ) -> (BnnGrads, DMatrix<f64>, DMatrix<f64>) {
        let BnnCache { mu, om, gm, go, bm, bo } = cache;
        let gp_mu = g_p.component_mul(mu);
        let gp_om = g_p.component_mul(om);
        let gq_mu = g_q.component_mul(mu);
        let gq_om = g_q.component_mul(om);

        let mut dw_g =
            &gp_mu * mu.transpose() + &gp_om * om.transpose() + &gq_om * mu.transpose()
                - &gq_mu * om.transpose();
        let mut dw_b =
            &gp_om * mu.transpose() - &gp_mu * om.transpose() - &gq_mu * mu.transpose()
                - &gq_om * om.transpose();
        if let Some(a) = &self.mask {
            dw_g.component_mul_assign(a);
            dw_b.component_mul_assign(a);
        }
        let db_p = DVector::from_fn(self.n(), |i, _| g_p.row(i).sum());
        let db_q = DVector::from_fn(self.n(), |i, _| g_q.row(i).sum());

        let wg_t = self.w_g.transpose();
        let wb_t = self.w_b.transpose();
        let d_mu = g_p.component_mul(&(gm - bo)) + &wg_t * &gp_mu + &wb_t * &gp_om
            - g_q.component_mul(&(go + bm))
            + &wg_t * &gq_om
            - &wb_t * &gq_mu;
        let d_om = g_p.component_mul(&(go + bm)) + &wg_t * &gp_om - &wb_t * &gp_mu
            + g_q.component_mul(&(gm - bo))
            - &wg_t * &gq_mu
            - &wb_t * &gq_om;
        (BnnGrads { dw_g, dw_b, db_p, db_q }, d_mu, d_om)
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum Decoder {
    Mlp(MlpDecoder),
    Bnn(Bnn),
}

pub enum DecoderCache {
    Mlp { p: Vec<DenseCache>, q: Vec<DenseCache> },
    Bnn(BnnCache),
}

pub enum DecoderGrads {
    Mlp { p: Vec<DenseGrads>, q: Vec<DenseGrads> },
    Bnn(BnnGrads),
}

impl Decoder {
    /// Maps physical voltages `[mu; om]` of shape `(2N, batch)` to stacked
    /// injections `[p; q]` of the same shape.
    pub fn forward(&self, v: &DMatrix<f64>) -> (DMatrix<f64>, DecoderCache) {
        let n = v.nrows() / 2;
        match self {
            Decoder::Mlp(d) => {
                let p_caches = d.p_branch.forward(v);
                let q_caches = d.q_branch.forward(v);
                let mut out = DMatrix::zeros(2 * n, v.ncols());
                out.rows_mut(0, n).copy_from(d.p_branch.output(&p_caches));
                out.rows_mut(n, n).copy_from(d.q_branch.output(&q_caches));
                (out, DecoderCache::Mlp { p: p_caches, q: q_caches })
            }
            Decoder::Bnn(d) => {
                let mu = v.rows(0, n).into_owned();
                let om = v.rows(n, n).into_owned();
                let (y_p, y_q, cache) = d.forward(&mu, &om);
                let mut out = DMatrix::zeros(2 * n, v.ncols());
                out.rows_mut(0, n).copy_from(&y_p);
                out.rows_mut(n, n).copy_from(&y_q);
                (out, DecoderCache::Bnn(cache))
            }
        }
    }

    /// Backward from stacked injection gradients; returns parameter grads and
    /// the gradient with respect to the stacked voltage input.
    pub fn backward(&self, cache: &DecoderCache, d_out: &DMatrix<f64>) -> (DecoderGrads, DMatrix<f64>) {
        let n = d_out.nrows() / 2;
        let g_p = d_out.rows(0, n).into_owned();
        let g_q = d_out.rows(n, n).into_owned();
        match (self, cache) {
            (Decoder::Mlp(d), DecoderCache::Mlp { p, q }) => {
                let (gp, dv_p) = d.p_branch.backward(p, &g_p);
                let (gq, dv_q) = d.q_branch.backward(q, &g_q);
                (DecoderGrads::Mlp { p: gp, q: gq }, dv_p + dv_q)
            }
            (Decoder::Bnn(d), DecoderCache::Bnn(c)) => {
                let (grads, d_mu, d_om) = d.backward(c, &g_p, &g_q);
                let mut dv = DMatrix::zeros(2 * n, d_out.ncols());
                dv.rows_mut(0, n).copy_from(&d_mu);
                dv.rows_mut(n, n).copy_from(&d_om);
                (DecoderGrads::Bnn(grads), dv)
            }
            _ => unreachable!("cache kind matches decoder kind"),
        }
    }
}

/// Joint solver model: encoder, decoder, loss weights, and the normalization
/// fitted on its training split.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PgnnModel {
    pub encoder: Mlp,
    pub decoder: Decoder,
    pub alpha_sup: f64,
    pub alpha_unsup: f64,
    pub norm: NormRecord,
}

impl PgnnModel {
    /// Predicts physical `[mu; om]` voltages for raw inputs `(d, batch)`.
    pub fn predict_voltages(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let x = normalize_cols(inputs, &self.norm.input);
        let caches = self.encoder.forward(&x);
        denormalize_cols(self.encoder.output(&caches), &self.norm.voltage)
    }

    /// Decoder output for physical voltages, stacked `[p; q]`.
    pub fn predict_injections(&self, v_phys: &DMatrix<f64>) -> DMatrix<f64> {
        self.decoder.forward(v_phys).0
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Encoder-only baseline: identical architecture and training loop but no
/// decoder and no reconstruction term.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MlpSolver {
    pub encoder: Mlp,
    pub norm: NormRecord,
}

impl MlpSolver {
    pub fn predict_voltages(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let x = normalize_cols(inputs, &self.norm.input);
        let caches = self.encoder.forward(&x);
        denormalize_cols(self.encoder.output(&caches), &self.norm.voltage)
    }
}

fn normalize_cols(m: &DMatrix<f64>, affine: &crate::data::Affine) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, k| (m[(i, k)] - affine.mean[i]) / affine.std[i])
}

fn denormalize_cols(m: &DMatrix<f64>, affine: &crate::data::Affine) -> DMatrix<f64> {
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, k| m[(i, k)] * affine.std[i] + affine.mean[i])
}

/// Loss terms of one epoch, train and validation, supervised and
/// reconstruction parts kept separate.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_sup: f64,
    pub train_unsup: f64,
    pub val_sup: f64,
    pub val_unsup: f64,
}

pub fn history_to_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_sup,train_unsup,val_sup,val_unsup\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{},{}\n",
            h.epoch,
            linalg::fmt_exact(h.train_sup),
            linalg::fmt_exact(h.train_unsup),
            linalg::fmt_exact(h.val_sup),
            linalg::fmt_exact(h.val_unsup)
        ));
    }
    out
}

struct MlpOpt(Vec<(Moments, VecMoments)>);

impl MlpOpt {
    fn new(net: &Mlp) -> Self {
        MlpOpt(
            net.layers
                .iter()
                .map(|l| (Moments::zeros_like(&l.w), VecMoments::zeros_like(&l.b)))
                .collect(),
        )
    }

    fn apply(&mut self, opt: &Adam, net: &mut Mlp, grads: &[DenseGrads]) {
        for ((layer, slot), g) in net.layers.iter_mut().zip(&mut self.0).zip(grads) {
            opt.update(&mut slot.0, &mut layer.w, &g.dw);
            opt.update_vec(&mut slot.1, &mut layer.b, &g.db);
        }
    }
}

enum DecoderOpt {
    Mlp { p: MlpOpt, q: MlpOpt },
    Bnn { g: Moments, b: Moments, bp: VecMoments, bq: VecMoments },
}

impl DecoderOpt {
    fn new(decoder: &Decoder) -> Self {
        match decoder {
            Decoder::Mlp(d) => {
                DecoderOpt::Mlp { p: MlpOpt::new(&d.p_branch), q: MlpOpt::new(&d.q_branch) }
            }
            Decoder::Bnn(d) => DecoderOpt::Bnn {
                g: Moments::zeros_like(&d.w_g),
                b: Moments::zeros_like(&d.w_b),
                bp: VecMoments::zeros_like(&d.b_p),
                bq: VecMoments::zeros_like(&d.b_q),
            },
        }
    }

    fn apply(&mut self, opt: &Adam, decoder: &mut Decoder, grads: &DecoderGrads) {
        match (self, decoder, grads) {
            (DecoderOpt::Mlp { p, q }, Decoder::Mlp(d), DecoderGrads::Mlp { p: gp, q: gq }) => {
                p.apply(opt, &mut d.p_branch, gp);
                q.apply(opt, &mut d.q_branch, gq);
            }
            (DecoderOpt::Bnn { g, b, bp, bq }, Decoder::Bnn(d), DecoderGrads::Bnn(gr)) => {
                opt.update(g, &mut d.w_g, &gr.dw_g);
                opt.update(b, &mut d.w_b, &gr.dw_b);
                opt.update_vec(bp, &mut d.b_p, &gr.db_p);
                opt.update_vec(bq, &mut d.b_q, &gr.db_q);
            }
            _ => unreachable!("optimizer kind matches decoder kind"),
        }
    }
}

/// Augments solver inputs with their elementwise squares `[x; x∘x]`. The
/// voltage response to each injection is locally quadratic, so a ridge solve
/// on these features tracks the solution manifold much closer than one on
/// `x` alone.
fn loading_features(x: &DMatrix<f64>) -> DMatrix<f64> {
    let d = x.nrows();
    let m = x.ncols();
    let mut phi = DMatrix::zeros(2 * d, m);
    for t in 0..m {
        for i in 0..d {
            phi[(i, t)] = x[(i, t)];
            phi[(d + i, t)] = x[(i, t)] * x[(i, t)];
        }
    }
    phi
}

/// Mean per-entry training variance of the injection targets, the scale
/// factor of the reconstruction loss.
fn pooled_injection_variance(norm: &NormRecord) -> f64 {
    let n = norm.injection.std.len() as f64;
    norm.injection.std.iter().map(|s| s * s).sum::<f64>() / n
}

/// One forward/backward pass of the joint model on normalized inputs.
/// Returns the two loss terms, encoder gradients (fully weighted), and
/// decoder gradients (weighted by `alpha_unsup`).
fn model_pass(
    encoder: &Mlp,
    decoder: &Decoder,
    norm: &NormRecord,
    alpha_sup: f64,
    alpha_unsup: f64,
    x_norm: &DMatrix<f64>,
    vz_target: &DMatrix<f64>,
    s_target: &DMatrix<f64>,
) -> (f64, f64, Vec<DenseGrads>, DecoderGrads) {
    let enc_caches = encoder.forward(x_norm);
    let z = encoder.output(&enc_caches);
    let (sup, dz_sup) = sq_loss(z, vz_target);

    let v_phys = denormalize_cols(z, &norm.voltage);
    let (s_pred, dec_cache) = decoder.forward(&v_phys);
    // The reconstruction loss is scaled by the pooled training variance of
    // the injections so both terms of the objective live on comparable
    // scales; a single pooled factor keeps the relative weighting of buses
    // physical.
    let inv_var = 1.0 / pooled_injection_variance(norm);
    let (unsup_raw, ds_raw) = sq_loss(&s_pred, s_target);
    let unsup = unsup_raw * inv_var;
    let ds = ds_raw * inv_var;
    let (dec_grads, dv_phys) = decoder.backward(&dec_cache, &(alpha_unsup * ds));

    // chain through the de-normalization: dz = dv_phys * std, rowwise
    let mut dz = dv_phys;
    for i in 0..dz.nrows() {
        let s = norm.voltage.std[i];
        for k in 0..dz.ncols() {
            dz[(i, k)] = dz[(i, k)] * s + alpha_sup * dz_sup[(i, k)];
        }
    }
    let (enc_grads, _) = encoder.backward(&enc_caches, &dz);
    (sup, unsup, enc_grads, dec_grads)
}

fn eval_losses(
    encoder: &Mlp,
    decoder: Option<&Decoder>,
    norm: &NormRecord,
    x_norm: &DMatrix<f64>,
    vz_target: &DMatrix<f64>,
    s_target: &DMatrix<f64>,
) -> (f64, f64) {
    let caches = encoder.forward(x_norm);
    let z = encoder.output(&caches);
    let (sup, _) = sq_loss(z, vz_target);
    let unsup = match decoder {
        Some(d) => {
            let v_phys = denormalize_cols(z, &norm.voltage);
            sq_loss(&d.forward(&v_phys).0, s_target).0 / pooled_injection_variance(norm)
        }
        None => 0.0,
    };
    (sup, unsup)
}

struct Batches {
    x: DMatrix<f64>,
    vz: DMatrix<f64>,
    s: DMatrix<f64>,
}

impl Batches {
    fn from_dataset(ds: &Dataset, norm: &NormRecord) -> Self {
        Batches {
            x: normalize_cols(&ds.input_matrix(), &norm.input),
            vz: normalize_cols(&ds.v_target_matrix(), &norm.voltage),
            s: ds.s_target_matrix(),
        }
    }

    fn select(&self, idx: &[usize]) -> (DMatrix<f64>, DMatrix<f64>, DMatrix<f64>) {
        (self.x.select_columns(idx), self.vz.select_columns(idx), self.s.select_columns(idx))
    }
}

/// Trains a joint encoder/decoder model. The encoder initialization, decoder
/// initialization, and batch shuffling each use their own RNG stream derived
/// from the seed, so setting `alpha_unsup = 0` reproduces the encoder-only
/// baseline step for step.
pub fn train_pgnn(
    kind: DecoderKind,
    adjacency: Option<&DMatrix<f64>>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(PgnnModel, Vec<EpochStats>), TrainError> {
    train_pgnn_from(kind, adjacency, None, train, val, cfg)
}

/// [`train_pgnn`] with an optional warm-start decoder. When `init` is given
/// it replaces the closed-form decoder initialization; the decoder RNG
/// stream is still advanced identically so encoder trajectories stay
/// comparable across warm and cold starts.
pub fn train_pgnn_from(
    kind: DecoderKind,
    adjacency: Option<&DMatrix<f64>>,
    init: Option<Decoder>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(PgnnModel, Vec<EpochStats>), TrainError> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let input_dim = train.samples[0].input.len();
    let n2 = train.samples[0].v_target.len();
    let n = n2 / 2;
    let norm = NormRecord::fit(train);

    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(&cfg.encoder_hidden);
    sizes.push(n2);
    let mut encoder = Mlp::new(&sizes, &mut rng_stream(cfg.seed, STREAM_ENCODER));

    // Every decoder starts from a closed-form ridge solve of its linear
    // parameters against the training pairs rather than from a cold start:
    // minibatch steps cannot carry the reconstruction weights to admittance
    // scale within a run, and an uninitialized decoder feeds the encoder
    // destructive reconstruction gradients. Fitting directly on noisy
    // voltages attenuates the weights (errors-in-variables), so the
    // voltages are first smoothed by a ridge regression from the inputs,
    // which averages the measurement noise across samples.
    let x_mat = train.input_matrix();
    let phi = loading_features(&x_mat);
    // Standardized features with a moderate ridge: the smoother must trade a
    // little approximation bias for a large cut in noise variance.
    let phi_z = normalize_cols(&phi, &crate::data::Affine::fit(&phi));
    let v_smooth = LinearModel::fit(&phi_z, &train.v_target_matrix(), 0.3)?.predict(&phi_z);
    let s_mat = train.s_target_matrix();
    let (p_tr, q_tr) = (s_mat.rows(0, n).into_owned(), s_mat.rows(n, n).into_owned());

    let mut dec_rng = rng_stream(cfg.seed, STREAM_DECODER);
    let cold = match kind {
        DecoderKind::Mlp => {
            let mut branch_sizes = vec![n2];
            branch_sizes.extend_from_slice(&cfg.decoder_hidden);
            branch_sizes.push(n);
            let mut p_branch = Mlp::new(&branch_sizes, &mut dec_rng);
            let mut q_branch = Mlp::new(&branch_sizes, &mut dec_rng);
            // With the hidden layers as fixed random features, the identity
            // output layer is linear in its weights; solve it in closed form.
            for (branch, target) in [(&mut p_branch, &p_tr), (&mut q_branch, &q_tr)] {
                let mut h = v_smooth.clone();
                for layer in &branch.layers[..branch.layers.len() - 1] {
                    h = layer.forward(&h).output;
                }
                let lm = LinearModel::fit(&h, target, 1e-6)?;
                let last = branch.layers.last_mut().expect("output layer");
                last.w = lm.w;
                last.b = lm.b;
            }
            Decoder::Mlp(MlpDecoder { p_branch, q_branch })
        }
        DecoderKind::Bnn | DecoderKind::Tpbnn => {
            let (mu, om) =
                (v_smooth.rows(0, n).into_owned(), v_smooth.rows(n, n).into_owned());
            let mask = match kind {
                DecoderKind::Tpbnn => {
                    Some(adjacency.expect("pruned decoder needs the adjacency matrix"))
                }
                _ => None,
            };
            let lambda = if mask.is_some() { 1e-8 } else { 1e-4 };
            Decoder::Bnn(Bnn::fit_least_squares(&mu, &om, &p_tr, &q_tr, mask, lambda)?)
        }
    };
    let mut decoder = init.unwrap_or(cold);

    let mut opt = Adam::new(cfg.lr);
    let mut dec_adam = Adam::new(cfg.decoder_lr);
    let mut enc_opt = MlpOpt::new(&encoder);
    let mut dec_opt = DecoderOpt::new(&decoder);

    let tr = Batches::from_dataset(train, &norm);
    let va = Batches::from_dataset(val, &norm);
    let mut shuffle_rng = rng_stream(cfg.seed, STREAM_SHUFFLE);

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best: Option<(Mlp, Decoder)> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, vz, s) = tr.select(chunk);
            let (sup, unsup, enc_grads, dec_grads) = model_pass(
                &encoder, &decoder, &norm, cfg.alpha_sup, cfg.alpha_unsup,
                &x, &vz, &s,
            );
            let total = cfg.alpha_sup * sup + cfg.alpha_unsup * unsup;
            if !total.is_finite() {
                return Err(TrainError::DivergedLoss { epoch, loss: total });
            }
            opt.begin_step();
            dec_adam.begin_step();
            enc_opt.apply(&opt, &mut encoder, &enc_grads);
            dec_opt.apply(&dec_adam, &mut decoder, &dec_grads);
        }
        if let Decoder::Bnn(b) = &decoder {
            b.check_mask()?;
        }
        let (train_sup, train_unsup) =
            eval_losses(&encoder, Some(&decoder), &norm, &tr.x, &tr.vz, &tr.s);
        let (val_sup, val_unsup) =
            eval_losses(&encoder, Some(&decoder), &norm, &va.x, &va.vz, &va.s);
        history.push(EpochStats { epoch, train_sup, train_unsup, val_sup, val_unsup });

        let val_total = cfg.alpha_sup * val_sup + cfg.alpha_unsup * val_unsup;
        if !val_total.is_finite() {
            return Err(TrainError::DivergedLoss { epoch, loss: val_total });
        }
        if val_total < best_val {
            best_val = val_total;
            best = Some((encoder.clone(), decoder.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (encoder, decoder) = best.expect("at least one epoch ran");
    Ok((
        PgnnModel {
            encoder,
            decoder,
            alpha_sup: cfg.alpha_sup,
            alpha_unsup: cfg.alpha_unsup,
            norm,
        },
        history,
    ))
}

/// Trains the plain supervised MLP solver (no decoder, no reconstruction
/// term) with the same streams, loop, and early stopping as [`train_pgnn`].
pub fn train_mlp_baseline(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(MlpSolver, Vec<EpochStats>), TrainError> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let input_dim = train.samples[0].input.len();
    let n2 = train.samples[0].v_target.len();
    let norm = NormRecord::fit(train);

    let mut sizes = vec![input_dim];
    sizes.extend_from_slice(&cfg.encoder_hidden);
    sizes.push(n2);
    let mut encoder = Mlp::new(&sizes, &mut rng_stream(cfg.seed, STREAM_ENCODER));
    let mut opt = Adam::new(cfg.lr);
    let mut enc_opt = MlpOpt::new(&encoder);

    let tr = Batches::from_dataset(train, &norm);
    let va = Batches::from_dataset(val, &norm);
    let mut shuffle_rng = rng_stream(cfg.seed, STREAM_SHUFFLE);

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best: Option<Mlp> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let (x, vz, _) = tr.select(chunk);
            let caches = encoder.forward(&x);
            let (sup, dz) = sq_loss(encoder.output(&caches), &vz);
            if !sup.is_finite() {
                return Err(TrainError::DivergedLoss { epoch, loss: sup });
            }
            let (grads, _) = encoder.backward(&caches, &(cfg.alpha_sup * dz));
            opt.begin_step();
            enc_opt.apply(&opt, &mut encoder, &grads);
        }
        let (train_sup, _) =
            eval_losses(&encoder, None, &norm, &tr.x, &tr.vz, &tr.s);
        let (val_sup, _) =
            eval_losses(&encoder, None, &norm, &va.x, &va.vz, &va.s);
        history.push(EpochStats { epoch, train_sup, train_unsup: 0.0, val_sup, val_unsup: 0.0 });

        let val_total = cfg.alpha_sup * val_sup;
        if !val_total.is_finite() {
            return Err(TrainError::DivergedLoss { epoch, loss: val_total });
        }
        if val_total < best_val {
            best_val = val_total;
            best = Some(encoder.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((MlpSolver { encoder: best.expect("at least one epoch ran"), norm }, history))
}

/// Trains a decoder alone on (voltage, injection) pairs, both in physical
/// per-unit terms. Loss values are recorded in the `unsup` history fields.
pub fn train_decoder(
    kind: DecoderKind,
    adjacency: Option<&DMatrix<f64>>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Decoder, Vec<EpochStats>), TrainError> {
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::EmptyDataset);
    }
    let n2 = train.samples[0].v_target.len();
    let n = n2 / 2;
    let mut dec_rng = rng_stream(cfg.seed, STREAM_DECODER);
    let mut decoder = match kind {
        DecoderKind::Mlp => {
            let mut branch_sizes = vec![n2];
            branch_sizes.extend_from_slice(&cfg.decoder_hidden);
            branch_sizes.push(n);
            Decoder::Mlp(MlpDecoder {
                p_branch: Mlp::new(&branch_sizes, &mut dec_rng),
                q_branch: Mlp::new(&branch_sizes, &mut dec_rng),
            })
        }
        DecoderKind::Bnn => Decoder::Bnn(Bnn::new(n, None)),
        DecoderKind::Tpbnn => {
            let a = adjacency.expect("pruned decoder needs the adjacency matrix").clone();
            Decoder::Bnn(Bnn::new(n, Some(a)))
        }
    };
    let mut opt = Adam::new(cfg.decoder_lr);
    let mut dec_opt = DecoderOpt::new(&decoder);

    let tr_v = train.v_target_matrix();
    let tr_s = train.s_target_matrix();
    let va_v = val.v_target_matrix();
    let va_s = val.s_target_matrix();
    let mut shuffle_rng = rng_stream(cfg.seed, STREAM_SHUFFLE);

    let mut history = Vec::new();
    let mut best_val = f64::INFINITY;
    let mut best: Option<Decoder> = None;
    let mut since_best = 0usize;

    for epoch in 0..cfg.max_epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut shuffle_rng);
        for chunk in order.chunks(cfg.batch_size) {
            let v = tr_v.select_columns(chunk);
            let s = tr_s.select_columns(chunk);
            let (s_pred, cache) = decoder.forward(&v);
            let (loss, ds) = sq_loss(&s_pred, &s);
            if !loss.is_finite() {
                return Err(TrainError::DivergedLoss { epoch, loss });
            }
            let (grads, _) = decoder.backward(&cache, &ds);
            opt.begin_step();
            dec_opt.apply(&opt, &mut decoder, &grads);
        }
        if let Decoder::Bnn(b) = &decoder {
            b.check_mask()?;
        }
        let train_unsup = sq_loss(&decoder.forward(&tr_v).0, &tr_s).0;
        let val_unsup = sq_loss(&decoder.forward(&va_v).0, &va_s).0;
        history.push(EpochStats { epoch, train_sup: 0.0, train_unsup, val_sup: 0.0, val_unsup });
        if !val_unsup.is_finite() {
            return Err(TrainError::DivergedLoss { epoch, loss: val_unsup });
        }
        if val_unsup < best_val {
            best_val = val_unsup;
            best = Some(decoder.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    Ok((best.expect("at least one epoch ran"), history))
}

/// Ridge-regularized linear map with intercept, the LR baseline.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LinearModel {
    pub w: DMatrix<f64>,
    pub b: DVector<f64>,
}

impl LinearModel {
    /// Closed-form fit from `(d, samples)` inputs to `(out, samples)`
    /// targets. If the normal equations are singular the ridge strength is
    /// raised by 100x, a few times, before giving up.
    pub fn fit(
        inputs: &DMatrix<f64>,
        targets: &DMatrix<f64>,
        lambda: f64,
    ) -> Result<Self, TrainError> {
        assert!(inputs.ncols() >= 2, "need at least two samples");
        assert_eq!(inputs.ncols(), targets.ncols(), "sample count mismatch");
        let d = inputs.nrows();
        let s = inputs.ncols();
        // augmented design matrix with an intercept row
        let mut a = DMatrix::zeros(d + 1, s);
        a.rows_mut(0, d).copy_from(inputs);
        a.row_mut(d).fill(1.0);
        let gram = &a * a.transpose();
        let rhs = &a * targets.transpose();

        let mut lam = lambda;
        for _ in 0..4 {
            let mut reg = gram.clone();
            for i in 0..d + 1 {
                reg[(i, i)] += lam;
            }
            let mut coeffs = DMatrix::zeros(d + 1, targets.nrows());
            let mut ok = true;
            for c in 0..targets.nrows() {
                match linalg::lu_solve(&reg, &rhs.column(c).into_owned()) {
                    Ok(x) => coeffs.set_column(c, &x),
                    Err(_) => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                let wt = coeffs.rows(0, d).into_owned();
                return Ok(LinearModel {
                    w: wt.transpose(),
                    b: coeffs.row(d).transpose(),
                });
            }
            lam *= 100.0;
        }
        Err(TrainError::SingularRegression { lambda: lam })
    }

    pub fn predict(&self, inputs: &DMatrix<f64>) -> DMatrix<f64> {
        let mut out = &self.w * inputs;
        for mut col in out.column_iter_mut() {
            col += &self.b;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::acpf::{injections_rect, RectState};
    use crate::case_model::{adjacency, build_admittance, parse_case, BusSystem};
    use crate::data::{
        add_noise, build_samples, gen_load_profiles, load_buses, scale_to_capacity, split,
        SplitSpec,
    };
    use crate::nn::grad_check;
    use approx::assert_relative_eq;

    fn ieee57() -> (BusSystem, crate::case_model::AdmittanceMatrix) {
        let path = concat!(env!("CARGO_MANIFEST_DIR"), "/../../cases/ieee57.case");
        let sys = parse_case(&std::fs::read_to_string(path).unwrap()).unwrap();
        let y = build_admittance(&sys);
        (sys, y)
    }

    fn small_splits(n_steps: usize, seed: u64) -> (BusSystem, Dataset, Dataset, Dataset) {
        let (sys, y) = ieee57();
        let profiles = gen_load_profiles(n_steps, load_buses(&sys).len(), seed);
        let schedule = scale_to_capacity(&sys, &profiles, 0.9).unwrap();
        let ds = build_samples(&sys, &y, &schedule, 1e-8).unwrap();
        let (tr, va, te) =
            split(&ds, &SplitSpec::Sequential { train_frac: 0.6, val_frac: 0.1 }).unwrap();
        let tr = add_noise(&tr, 0.01, seed + 1);
        (sys, tr, va, te)
    }

    fn random_voltages(n: usize, batch: usize, seed: u64) -> (DMatrix<f64>, DMatrix<f64>) {
        let mut rng = rng_stream(seed, 9);
        let mu = DMatrix::from_fn(n, batch, |_, _| 0.9 + 0.2 * rng.random::<f64>());
        let om = DMatrix::from_fn(n, batch, |_, _| 0.2 * rng.random::<f64>() - 0.1);
        (mu, om)
    }

    #[test]
    fn bnn_forward_matches_outer_product_oracle() {
        // golden values from a script computing S1/S2 via explicit outer
        // products and Hadamard sums, N = 4
        let n = 4;
        let mut d = Bnn::new(n, None);
        for i in 0..n {
            for k in 0..n {
                d.w_g[(i, k)] = (0.9 * (4 * i + k) as f64 + 0.2).sin();
                d.w_b[(i, k)] = (1.1 * (4 * i + k) as f64 - 0.4).cos();
            }
            d.b_p[i] = 0.01 * i as f64;
            d.b_q[i] = -0.02 * i as f64;
        }
        let mu = DMatrix::from_fn(n, 1, |i, _| 1.0 + 0.02 * (i as f64 + 0.3).sin());
        let om = DMatrix::from_fn(n, 1, |i, _| 0.05 * (2.0 * i as f64 - 0.1).cos());
        let (y_p, y_q, _) = d.forward(&mu, &om);
        let p_want = [2.310271613151383, -2.059974392621383, 1.4800244373491116, -0.5178211659055766];
        let q_want = [-0.37093606415846214, -1.2943998285877347, 1.2199463988713084, 0.3943592763160944];
        for i in 0..n {
            assert_relative_eq!(y_p[(i, 0)], p_want[i], epsilon = 1e-13);
            assert_relative_eq!(y_q[(i, 0)], q_want[i], epsilon = 1e-13);
        }
    }

    #[test]
    fn bnn_with_true_admittance_reproduces_power_flow() {
        let (_, y) = ieee57();
        let n = y.n();
        let mut d = Bnn::new(n, None);
        d.w_g = y.g.clone();
        d.w_b = y.b.clone();
        let (mu, om) = random_voltages(n, 5, 1);
        let (y_p, y_q, _) = d.forward(&mu, &om);
        for b in 0..5 {
            let rect = RectState { mu: mu.column(b).into_owned(), omega: om.column(b).into_owned() };
            let inj = injections_rect(&rect, &y);
            assert!((y_p.column(b) - &inj.p).amax() <= 1e-10);
            assert!((y_q.column(b) - &inj.q).amax() <= 1e-10);
        }
    }

    #[test]
    fn bnn_zero_voltage_outputs_biases() {
        let n = 6;
        let mut d = Bnn::new(n, None);
        d.w_g.fill(0.7);
        d.w_b.fill(-0.3);
        d.b_p = DVector::from_fn(n, |i, _| i as f64);
        d.b_q = DVector::from_fn(n, |i, _| -(i as f64));
        let zero = DMatrix::zeros(n, 2);
        let (y_p, y_q, _) = d.forward(&zero, &zero);
        for b in 0..2 {
            for i in 0..n {
                assert_eq!(y_p[(i, b)], d.b_p[i]);
                assert_eq!(y_q[(i, b)], d.b_q[i]);
            }
        }
    }

    #[test]
    fn bnn_backward_matches_finite_differences() {
        let n = 5;
        let mut rng = rng_stream(4, 0);
        let mut d = Bnn::new(n, None);
        d.w_g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
        d.w_b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
        d.b_p = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
        d.b_q = DVector::from_fn(n, |_, _| rng.random_range(-0.5..0.5));
        let (mu, om) = random_voltages(n, 3, 8);
        let target_p = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));
        let target_q = DMatrix::from_fn(n, 3, |_, _| rng.random_range(-1.0..1.0));

        let loss = |dd: &Bnn, mu: &DMatrix<f64>, om: &DMatrix<f64>| {
            let (y_p, y_q, _) = dd.forward(mu, om);
            sq_loss(&y_p, &target_p).0 + sq_loss(&y_q, &target_q).0
        };
        let (y_p, y_q, cache) = d.forward(&mu, &om);
        let (_, g_p) = sq_loss(&y_p, &target_p);
        let (_, g_q) = sq_loss(&y_q, &target_q);
        let (grads, d_mu, d_om) = d.backward(&cache, &g_p, &g_q);

        let flat = |m: &DMatrix<f64>| DVector::from_column_slice(m.as_slice());
        let wg_err = grad_check(
            |w| {
                let mut dd = d.clone();
                dd.w_g.copy_from_slice(w.as_slice());
                loss(&dd, &mu, &om)
            },
            &flat(&d.w_g),
            &flat(&grads.dw_g),
            1e-6,
        );
        assert!(wg_err < 1e-7, "w_g gradient error {wg_err}");
        let wb_err = grad_check(
            |w| {
                let mut dd = d.clone();
                dd.w_b.copy_from_slice(w.as_slice());
                loss(&dd, &mu, &om)
            },
            &flat(&d.w_b),
            &flat(&grads.dw_b),
            1e-6,
        );
        assert!(wb_err < 1e-7, "w_b gradient error {wb_err}");
        let mu_err = grad_check(
            |m| {
                let mm = DMatrix::from_column_slice(n, 3, m.as_slice());
                loss(&d, &mm, &om)
            },
            &flat(&mu),
            &flat(&d_mu),
            1e-6,
        );
        assert!(mu_err < 1e-7, "mu gradient error {mu_err}");
        let om_err = grad_check(
            |m| {
                let mm = DMatrix::from_column_slice(n, 3, m.as_slice());
                loss(&d, &mu, &mm)
            },
            &flat(&om),
            &flat(&d_om),
            1e-6,
        );
        assert!(om_err < 1e-7, "omega gradient error {om_err}");
        let bp_err = grad_check(
            |b| {
                let mut dd = d.clone();
                dd.b_p.copy_from(b);
                loss(&dd, &mu, &om)
            },
            &d.b_p,
            &grads.db_p,
            1e-6,
        );
        assert!(bp_err < 1e-8, "b_p gradient error {bp_err}");
    }

    #[test]
    fn zero_upstream_gives_zero_parameter_grads() {
        let n = 4;
        let d = Bnn::new(n, None);
        let (mu, om) = random_voltages(n, 2, 3);
        let (_, _, cache) = d.forward(&mu, &om);
        let zero = DMatrix::zeros(n, 2);
        let (grads, d_mu, d_om) = d.backward(&cache, &zero, &zero);
        assert_eq!(grads.dw_g.amax(), 0.0);
        assert_eq!(grads.dw_b.amax(), 0.0);
        assert_eq!(d_mu.amax(), 0.0);
        assert_eq!(d_om.amax(), 0.0);
    }

    #[test]
    fn all_ones_mask_is_plain_bilinear() {
        let n = 4;
        let mut rng = rng_stream(6, 1);
        let mut plain = Bnn::new(n, None);
        plain.w_g = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
        plain.w_b = DMatrix::from_fn(n, n, |_, _| rng.random_range(-0.5..0.5));
        let mut masked = plain.clone();
        masked.mask = Some(DMatrix::from_element(n, n, 1.0));
        let (mu, om) = random_voltages(n, 3, 5);
        let (p1, q1, c1) = plain.forward(&mu, &om);
        let (p2, q2, c2) = masked.forward(&mu, &om);
        assert_eq!(p1, p2);
        assert_eq!(q1, q2);
        let g = DMatrix::from_element(n, 3, 0.5);
        let (ga, _, _) = plain.backward(&c1, &g, &g);
        let (gb, _, _) = masked.backward(&c2, &g, &g);
        assert_eq!(ga.dw_g, gb.dw_g);
        assert_eq!(ga.dw_b, gb.dw_b);
    }

    #[test]
    fn masked_entries_get_zero_gradients() {
        let n = 4;
        let mut mask = DMatrix::from_element(n, n, 1.0);
        mask[(0, 3)] = 0.0;
        mask[(2, 1)] = 0.0;
        let d = Bnn::new(n, Some(mask.clone()));
        let (mu, om) = random_voltages(n, 6, 2);
        let (_, _, cache) = d.forward(&mu, &om);
        let g = DMatrix::from_element(n, 6, 1.0);
        let (grads, _, _) = d.backward(&cache, &g, &g);
        assert_eq!(grads.dw_g[(0, 3)], 0.0);
        assert_eq!(grads.dw_g[(2, 1)], 0.0);
        assert_eq!(grads.dw_b[(0, 3)], 0.0);
        assert_eq!(grads.dw_b[(2, 1)], 0.0);
        d.check_mask().unwrap();
    }

    #[test]
    fn mask_violation_is_detected() {
        let n = 3;
        let mut mask = DMatrix::from_element(n, n, 1.0);
        mask[(1, 2)] = 0.0;
        let mut d = Bnn::new(n, Some(mask));
        d.w_g[(1, 2)] = 0.5;
        assert!(matches!(d.check_mask(), Err(TrainError::MaskViolation { row: 1, col: 2, .. })));
    }

    fn tiny_cfg(seed: u64) -> TrainConfig {
        TrainConfig {
            encoder_hidden: vec![32],
            decoder_hidden: vec![32],
            max_epochs: 12,
            patience: 6,
            seed,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn loss_gradient_splits_into_supervised_and_decoder_paths() {
        // the gradient at the encoder output equals the weighted supervised
        // residual term plus the decoder-propagated reconstruction term
        let (sys, tr, va, _) = small_splits(60, 31);
        let y = build_admittance(&sys);
        let a = adjacency(&sys).a;
        let cfg = tiny_cfg(2);
        let (model, _) =
            train_pgnn(DecoderKind::Tpbnn, Some(&a), &tr, &va, &cfg).unwrap();
        let _ = y;

        let batch = Batches::from_dataset(&va, &model.norm);
        let idx: Vec<usize> = (0..va.len().min(8)).collect();
        let (x, vz, s) = batch.select(&idx);

        let caches = model.encoder.forward(&x);
        let z = model.encoder.output(&caches).clone();
        let (_, dz_sup) = sq_loss(&z, &vz);
        let v_phys = denormalize_cols(&z, &model.norm.voltage);
        let (s_pred, dec_cache) = model.decoder.forward(&v_phys);
        let (_, ds) = sq_loss(&s_pred, &s);
        let (_, dv_phys) = model.decoder.backward(&dec_cache, &(model.alpha_unsup * ds));
        let mut dz_unsup = dv_phys;
        for i in 0..dz_unsup.nrows() {
            for k in 0..dz_unsup.ncols() {
                dz_unsup[(i, k)] *= model.norm.voltage.std[i];
            }
        }
        let two_path = model.alpha_sup * &dz_sup + &dz_unsup;

        // independent total-loss function of z, checked by finite differences
        let total_of_z = |zv: &DVector<f64>| {
            let zm = DMatrix::from_column_slice(z.nrows(), z.ncols(), zv.as_slice());
            let (sup, _) = sq_loss(&zm, &vz);
            let vp = denormalize_cols(&zm, &model.norm.voltage);
            let (unsup, _) = sq_loss(&model.decoder.forward(&vp).0, &s);
            model.alpha_sup * sup + model.alpha_unsup * unsup
        };
        let z_flat = DVector::from_column_slice(z.as_slice());
        let two_path_flat = DVector::from_column_slice(two_path.as_slice());
        let err = grad_check(total_of_z, &z_flat, &two_path_flat, 1e-6);
        assert!(err < 1e-6, "two-path gradient error {err}");

        // and the training pass assembles exactly that sum
        let (_, _, enc_grads, _) = model_pass(
            &model.encoder,
            &model.decoder,
            &model.norm,
            model.alpha_sup,
            model.alpha_unsup,
            &x,
            &vz,
            &s,
        );
        let (enc_grads_direct, _) = model.encoder.backward(&caches, &two_path);
        for (a, b) in enc_grads.iter().zip(&enc_grads_direct) {
            assert!((&a.dw - &b.dw).amax() <= 1e-10);
        }
    }

    #[test]
    fn zero_unsup_weight_reproduces_baseline_trace() {
        let (_, tr, va, _) = small_splits(60, 13);
        let cfg = TrainConfig { alpha_unsup: 0.0, ..tiny_cfg(5) };
        let (pg, pg_hist) = train_pgnn(DecoderKind::Mlp, None, &tr, &va, &cfg).unwrap();
        let (base, base_hist) = train_mlp_baseline(&tr, &va, &cfg).unwrap();
        assert_eq!(pg_hist.len(), base_hist.len());
        for (a, b) in pg_hist.iter().zip(&base_hist) {
            assert_eq!(a.train_sup, b.train_sup, "epoch {} sup loss differs", a.epoch);
            assert_eq!(a.val_sup, b.val_sup);
        }
        for (la, lb) in pg.encoder.layers.iter().zip(&base.encoder.layers) {
            assert_eq!(la.w, lb.w, "encoder weights diverged");
            assert_eq!(la.b, lb.b);
        }
    }

    #[test]
    fn training_is_deterministic_in_seed() {
        let (_, tr, va, _) = small_splits(40, 19);
        let cfg = TrainConfig { max_epochs: 4, ..tiny_cfg(11) };
        let (m1, h1) = train_pgnn(DecoderKind::Bnn, None, &tr, &va, &cfg).unwrap();
        let (m2, h2) = train_pgnn(DecoderKind::Bnn, None, &tr, &va, &cfg).unwrap();
        assert_eq!(h1, h2);
        for (la, lb) in m1.encoder.layers.iter().zip(&m2.encoder.layers) {
            assert_eq!(la.w, lb.w);
        }
    }

    #[test]
    fn pruned_training_keeps_off_pattern_weights_at_zero() {
        let (sys, tr, va, _) = small_splits(50, 23);
        let a = adjacency(&sys).a;
        let cfg = TrainConfig { max_epochs: 6, ..tiny_cfg(3) };
        let (model, _) = train_pgnn(DecoderKind::Tpbnn, Some(&a), &tr, &va, &cfg).unwrap();
        let Decoder::Bnn(b) = &model.decoder else { panic!("expected bilinear decoder") };
        for i in 0..b.n() {
            for k in 0..b.n() {
                if a[(i, k)] == 0.0 {
                    assert_eq!(b.w_g[(i, k)], 0.0);
                    assert_eq!(b.w_b[(i, k)], 0.0);
                }
            }
        }
    }

    #[test]
    fn best_validation_loss_is_monotone_in_history() {
        let (_, tr, va, _) = small_splits(50, 29);
        let (_, hist) = train_pgnn(DecoderKind::Bnn, None, &tr, &va, &tiny_cfg(7)).unwrap();
        let mut best = f64::INFINITY;
        for h in &hist {
            let total = h.val_sup + 0.1 * h.val_unsup;
            best = best.min(total);
        }
        assert!(best.is_finite());
        let last_best = hist
            .iter()
            .map(|h| h.val_sup + 0.1 * h.val_unsup)
            .fold(f64::INFINITY, f64::min);
        assert_eq!(best, last_best);
    }

    #[test]
    fn checkpoint_round_trips_exactly() {
        let (_, tr, va, _) = small_splits(40, 37);
        let cfg = TrainConfig { max_epochs: 3, ..tiny_cfg(13) };
        let (model, _) = train_pgnn(DecoderKind::Mlp, None, &tr, &va, &cfg).unwrap();
        let restored = PgnnModel::from_json(&model.to_json()).unwrap();
        for (la, lb) in model.encoder.layers.iter().zip(&restored.encoder.layers) {
            assert_eq!(la.w, lb.w);
            assert_eq!(la.b, lb.b);
        }
        let x = tr.input_matrix();
        assert_eq!(model.predict_voltages(&x), restored.predict_voltages(&x));
    }

    #[test]
    fn linear_model_fits_exactly_linear_data() {
        let mut rng = rng_stream(41, 0);
        let w_true = DMatrix::from_fn(3, 4, |_, _| rng.random_range(-1.0..1.0));
        let x = DMatrix::from_fn(4, 50, |_, _| rng.random_range(-1.0..1.0));
        let y = &w_true * &x;
        let model = LinearModel::fit(&x, &y, 1e-10).unwrap();
        let resid = (model.predict(&x) - &y).amax();
        assert!(resid < 1e-6, "residual {resid}");
    }

    #[test]
    fn ridge_handles_duplicate_features() {
        let mut rng = rng_stream(43, 0);
        let base = DMatrix::from_fn(3, 30, |_, _| rng.random_range(-1.0..1.0));
        let mut x = DMatrix::zeros(6, 30);
        x.rows_mut(0, 3).copy_from(&base);
        x.rows_mut(3, 3).copy_from(&base);
        let y = DMatrix::from_fn(2, 30, |_, c| base[(0, c)] + 0.5 * base[(2, c)]);
        let model = LinearModel::fit(&x, &y, 1e-6).unwrap();
        let resid = (model.predict(&x) - &y).amax();
        assert!(resid < 1e-3, "residual {resid}");
    }

    #[test]
    fn history_csv_has_expected_columns() {
        let hist = vec![EpochStats {
            epoch: 0,
            train_sup: 1.5,
            train_unsup: 0.25,
            val_sup: 2.0,
            val_unsup: 0.5,
        }];
        let csv = history_to_csv(&hist);
        assert!(csv.starts_with("epoch,train_sup,train_unsup,val_sup,val_unsup\n"));
        assert!(csv.contains("0,1.5,0.25,2.0,0.5"));
    }
}
