//! Teacher-forced forward and backward passes.
//!
//! Sequence layout: position 0 takes the projected feature vector (the
//! conditioning), position t >= 1 takes the embedding of `tokens[t-1]` plus
//! a learned re-embedding of its payload when that token was `[ROT]` or
//! `[CLIP]`. The hidden state at position t predicts `tokens[t]`; at special
//! target positions it additionally feeds the matching regression head, so
//! every position contributes to exactly one of {ce, ce+rot, ce+clip}.

use super::{DecoderConfig, DecoderError, TrainState};
use crate::codec::{HybridTokenStream, SlotPayload, CLIP_TOKEN, ROT_TOKEN};
use crate::index::{cosine_embedding_loss, cosine_embedding_loss_grad};
use crate::rot::{
    matrix_from_row_major, rotation_loss, rotation_loss_grad, symmetric_orthogonalize, Rotation,
};

const RMS_EPS: f64 = 1e-6;

/// Loss components of one teacher-forced pass. `total` is the weighted sum;
/// `ce` averages over all positions, `rot`/`clip` over their positions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub ce: f64,
    pub rot: f64,
    pub clip: f64,
}

pub(crate) struct Prepared<'a> {
    pub tokens: &'a [u32],
    pub feat: Vec<f64>,
    /// Payload carried by `tokens[t-1]`, indexed by input position t.
    pub input_payload: Vec<Option<&'a SlotPayload>>,
    /// Payload carried by `tokens[t]`, indexed by target position t.
    pub target_payload: Vec<Option<&'a SlotPayload>>,
}

pub(crate) fn prepare<'a>(
    cfg: &DecoderConfig,
    features: &[f32],
    stream: &'a HybridTokenStream,
) -> Result<Prepared<'a>, DecoderError> {
    let t_len = stream.tokens.len();
    if t_len > cfg.context {
        return Err(DecoderError::ContextOverflow {
            len: t_len,
            context: cfg.context,
        });
    }
    if features.len() != cfg.feature_dim {
        return Err(DecoderError::FeatureDimMismatch {
            expected: cfg.feature_dim,
            got: features.len(),
        });
    }
    let mut input_payload = vec![None; t_len];
    let mut target_payload = vec![None; t_len];
    let mut occ = 0usize;
    for (t, &tok) in stream.tokens.iter().enumerate() {
        if tok as usize >= cfg.vocab_size {
            return Err(DecoderError::TokenOutOfRange(tok));
        }
        if tok == ROT_TOKEN || tok == CLIP_TOKEN {
            let payload = stream
                .slots
                .get(occ)
                .ok_or(crate::codec::CodecError::SlotUnderflow("stream"))?;
            if let SlotPayload::Clip(v) = payload {
                if v.len() != cfg.dim {
                    return Err(DecoderError::PayloadDimMismatch {
                        expected: cfg.dim,
                        got: v.len(),
                    });
                }
            }
            target_payload[t] = Some(payload);
            if t + 1 < t_len {
                input_payload[t + 1] = Some(payload);
            }
            occ += 1;
        }
    }
    Ok(Prepared {
        tokens: &stream.tokens,
        feat: features.iter().map(|&x| f64::from(x)).collect(),
        input_payload,
        target_payload,
    })
}

// Flat-slice linear algebra. Weights are row-major [out, in].

fn matvec_acc(y: &mut [f64], w: &[f64], x: &[f64]) {
    let (out, inp) = (y.len(), x.len());
    debug_assert_eq!(w.len(), out * inp);
    for o in 0..out {
        let row = &w[o * inp..(o + 1) * inp];
        y[o] += row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn matvec_t_acc(dx: &mut [f64], w: &[f64], dy: &[f64]) {
    let (out, inp) = (dy.len(), dx.len());
    debug_assert_eq!(w.len(), out * inp);
    for o in 0..out {
        let g = dy[o];
        if g == 0.0 {
            continue;
        }
        let row = &w[o * inp..(o + 1) * inp];
        for i in 0..inp {
            dx[i] += row[i] * g;
        }
    }
}

fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64]) {
    let inp = x.len();
    debug_assert_eq!(dw.len(), dy.len() * inp);
    for (o, &g) in dy.iter().enumerate() {
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[o * inp..(o + 1) * inp];
        for i in 0..inp {
            row[i] += g * x[i];
        }
    }
}

fn add_acc(y: &mut [f64], x: &[f64]) {
    for (a, b) in y.iter_mut().zip(x) {
        *a += b;
    }
}

fn rms_fwd(x: &[f64], y: &mut [f64]) {
    let n = x.len() as f64;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / n;
    let r = (ms + RMS_EPS).sqrt().recip();
    for (o, v) in y.iter_mut().zip(x) {
        *o = v * r;
    }
}

fn rms_bwd(dy: &[f64], x: &[f64], dx: &mut [f64]) {
    let n = x.len() as f64;
    let ms = x.iter().map(|v| v * v).sum::<f64>() / n;
    let r = (ms + RMS_EPS).sqrt().recip();
    let dot: f64 = dy.iter().zip(x).map(|(a, b)| a * b).sum();
    let c = r * r * r / n * dot;
    for i in 0..x.len() {
        dx[i] += r * dy[i] - c * x[i];
    }
}

fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_deriv(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

struct LayerCache {
    x_in: Vec<f64>,
    n1: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    att_w: Vec<f64>, // [heads, T, T], row t holds weights over j <= t
    att_o: Vec<f64>,
    x_mid: Vec<f64>,
    n2: Vec<f64>,
    f1: Vec<f64>,
    g: Vec<f64>,
}

pub(crate) struct RotSite {
    pub pos: usize,
    r1: Vec<f64>,
    rg: Vec<f64>,
    pub pred9: [f64; 9],
    target: Rotation,
    loss: f64,
}

struct ClipSite {
    pos: usize,
    pred: Vec<f64>,
    target: Vec<f64>,
    loss: f64,
}

pub(crate) struct Forward {
    layers: Vec<LayerCache>,
    /// Residual stream entering the final norm.
    x_final: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
    pub rot_sites: Vec<RotSite>,
    clip_sites: Vec<ClipSite>,
    pub breakdown: LossBreakdown,
    t_len: usize,
}

pub(crate) fn forward(
    state: &TrainState,
    prep: &Prepared<'_>,
) -> Forward {
    let cfg = &state.cfg;
    let layout = state.layout();
    let p = &state.params;
    let (w, v_dim) = (cfg.width, cfg.vocab_size);
    let t_len = prep.tokens.len();
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();

    // Embedding.
    let mut x0 = vec![0.0f64; t_len * w];
    for t in 0..t_len {
        let xt = &mut x0[t * w..(t + 1) * w];
        xt.copy_from_slice(&p[layout.pos_emb.clone()][t * w..(t + 1) * w]);
        if t == 0 {
            matvec_acc(xt, &p[layout.feat_w.clone()], &prep.feat);
            add_acc(xt, &p[layout.feat_b.clone()]);
        } else {
            let prev = prep.tokens[t - 1] as usize;
            add_acc(xt, &p[layout.tok_emb.clone()][prev * w..(prev + 1) * w]);
            match prep.input_payload[t] {
                Some(SlotPayload::Rot(m)) => {
                    let m9: Vec<f64> = m.iter().map(|&x| f64::from(x)).collect();
                    matvec_acc(xt, &p[layout.rot_in.clone()], &m9);
                }
                Some(SlotPayload::Clip(c)) => {
                    let cd: Vec<f64> = c.iter().map(|&x| f64::from(x)).collect();
                    matvec_acc(xt, &p[layout.clip_in.clone()], &cd);
                }
                None => {}
            }
        }
    }

    // Trunk.
    let mut x = x0;
    let mut layers = Vec::with_capacity(cfg.layers);
    for ls in &layout.layers {
        let x_in = x;
        let mut n1 = vec![0.0; t_len * w];
        for t in 0..t_len {
            rms_fwd(&x_in[t * w..(t + 1) * w], &mut n1[t * w..(t + 1) * w]);
        }
        let mut q = vec![0.0; t_len * w];
        let mut k = vec![0.0; t_len * w];
        let mut v = vec![0.0; t_len * w];
        for t in 0..t_len {
            let nt = &n1[t * w..(t + 1) * w];
            matvec_acc(&mut q[t * w..(t + 1) * w], &p[ls.wq.clone()], nt);
            matvec_acc(&mut k[t * w..(t + 1) * w], &p[ls.wk.clone()], nt);
            matvec_acc(&mut v[t * w..(t + 1) * w], &p[ls.wv.clone()], nt);
        }
        let mut att_w = vec![0.0; heads * t_len * t_len];
        let mut att_o = vec![0.0; t_len * w];
        for h in 0..heads {
            let hoff = h * dh;
            for t in 0..t_len {
                let qt = &q[t * w + hoff..t * w + hoff + dh];
                let row = &mut att_w[h * t_len * t_len + t * t_len..h * t_len * t_len + t * t_len + t + 1];
                let mut maxv = f64::NEG_INFINITY;
                for (j, r) in row.iter_mut().enumerate() {
                    let kj = &k[j * w + hoff..j * w + hoff + dh];
                    let s = qt.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * inv_sqrt;
                    *r = s;
                    if s > maxv {
                        maxv = s;
                    }
                }
                let mut sum = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - maxv).exp();
                    sum += *r;
                }
                for r in row.iter_mut() {
                    *r /= sum;
                }
                let ot = &mut att_o[t * w + hoff..t * w + hoff + dh];
                for (j, &a) in row.iter().enumerate() {
                    let vj = &v[j * w + hoff..j * w + hoff + dh];
                    for d in 0..dh {
                        ot[d] += a * vj[d];
                    }
                }
            }
        }
        let mut x_mid = x_in.clone();
        for t in 0..t_len {
            matvec_acc(
                &mut x_mid[t * w..(t + 1) * w],
                &p[ls.wo.clone()],
                &att_o[t * w..(t + 1) * w],
            );
        }
        let mut n2 = vec![0.0; t_len * w];
        for t in 0..t_len {
            rms_fwd(&x_mid[t * w..(t + 1) * w], &mut n2[t * w..(t + 1) * w]);
        }
        let w4 = 4 * w;
        let mut f1 = vec![0.0; t_len * w4];
        let mut g = vec![0.0; t_len * w4];
        let mut x_out = x_mid.clone();
        for t in 0..t_len {
            let f1t = &mut f1[t * w4..(t + 1) * w4];
            f1t.copy_from_slice(&p[ls.fc1_b.clone()]);
            matvec_acc(f1t, &p[ls.fc1.clone()], &n2[t * w..(t + 1) * w]);
            let gt = &mut g[t * w4..(t + 1) * w4];
            for i in 0..w4 {
                gt[i] = gelu(f1t[i]);
            }
            let xo = &mut x_out[t * w..(t + 1) * w];
            matvec_acc(xo, &p[ls.fc2.clone()], gt);
            add_acc(xo, &p[ls.fc2_b.clone()]);
        }
        layers.push(LayerCache {
            x_in,
            n1,
            q,
            k,
            v,
            att_w,
            att_o,
            x_mid,
            n2,
            f1,
            g,
        });
        x = x_out;
    }

    let mut hidden = vec![0.0; t_len * w];
    for t in 0..t_len {
        rms_fwd(&x[t * w..(t + 1) * w], &mut hidden[t * w..(t + 1) * w]);
    }
    // The pre-norm stream of the final position is only needed by backward;
    // stash it as an extra pseudo-layer input when there are zero layers.
    let x_final = x;

    // Token logits and CE.
    let mut probs = vec![0.0; t_len * v_dim];
    let mut ce_sum = 0.0;
    for t in 0..t_len {
        let zt = &mut probs[t * v_dim..(t + 1) * v_dim];
        zt.copy_from_slice(&p[layout.out_b.clone()]);
        matvec_acc(zt, &p[layout.out_w.clone()], &hidden[t * w..(t + 1) * w]);
        let maxv = zt.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for z in zt.iter_mut() {
            *z = (*z - maxv).exp();
            sum += *z;
        }
        for z in zt.iter_mut() {
            *z /= sum;
        }
        let target = prep.tokens[t] as usize;
        ce_sum += -(zt[target].max(1e-300)).ln();
    }

    // Regression heads.
    let mut rot_sites = Vec::new();
    let mut clip_sites = Vec::new();
    for t in 0..t_len {
        match prep.target_payload[t] {
            Some(SlotPayload::Rot(m)) => {
                let ht = &hidden[t * w..(t + 1) * w];
                let rh = cfg.rot_hidden;
                let mut r1 = p[layout.rot_b1.clone()].to_vec();
                matvec_acc(&mut r1, &p[layout.rot_w1.clone()], ht);
                let rg: Vec<f64> = r1.iter().map(|&x| gelu(x)).collect();
                debug_assert_eq!(rg.len(), rh);
                let mut out9 = p[layout.rot_b2.clone()].to_vec();
                matvec_acc(&mut out9, &p[layout.rot_w2.clone()], &rg);
                let pred9: [f64; 9] = std::array::from_fn(|i| out9[i]);
                let wide: [f64; 9] = std::array::from_fn(|i| f64::from(m[i]));
                let mat = matrix_from_row_major(&wide);
                let target = Rotation::try_new(mat, crate::rot::ROTATION_TOL)
                    .unwrap_or_else(|_| symmetric_orthogonalize(&mat));
                let loss = rotation_loss(&pred9, &target);
                rot_sites.push(RotSite {
                    pos: t,
                    r1,
                    rg,
                    pred9,
                    target,
                    loss,
                });
            }
            Some(SlotPayload::Clip(c)) => {
                let ht = &hidden[t * w..(t + 1) * w];
                let mut pred = p[layout.clip_b.clone()].to_vec();
                matvec_acc(&mut pred, &p[layout.clip_w.clone()], ht);
                let target: Vec<f64> = c.iter().map(|&x| f64::from(x)).collect();
                let loss = cosine_embedding_loss(&pred, &target, cfg.lambda);
                clip_sites.push(ClipSite {
                    pos: t,
                    pred,
                    target,
                    loss,
                });
            }
            None => {}
        }
    }

    let ce = ce_sum / t_len as f64;
    let rot = if rot_sites.is_empty() {
        0.0
    } else {
        rot_sites.iter().map(|s| s.loss).sum::<f64>() / rot_sites.len() as f64
    };
    let clip = if clip_sites.is_empty() {
        0.0
    } else {
        clip_sites.iter().map(|s| s.loss).sum::<f64>() / clip_sites.len() as f64
    };
    let (wc, wr, wk2) = cfg.loss_weights;
    let breakdown = LossBreakdown {
        total: wc * ce + wr * rot + wk2 * clip,
        ce,
        rot,
        clip,
    };

    Forward {
        layers,
        x_final,
        hidden,
        probs,
        rot_sites,
        clip_sites,
        breakdown,
        t_len,
    }
}

pub(crate) fn backward(
    state: &TrainState,
    prep: &Prepared<'_>,
    fwd: &Forward,
) -> Vec<f64> {
    let cfg = &state.cfg;
    let layout = state.layout();
    let p = &state.params;
    let (w, v_dim) = (cfg.width, cfg.vocab_size);
    let t_len = fwd.t_len;
    let heads = cfg.heads;
    let dh = cfg.head_dim();
    let inv_sqrt = 1.0 / (dh as f64).sqrt();
    let (wc, wr, wk2) = cfg.loss_weights;

    let mut grads = vec![0.0f64; layout.total];
    let mut d_hidden = vec![0.0f64; t_len * w];

    // CE head.
    let ce_scale = wc / t_len as f64;
    for t in 0..t_len {
        let pt = &fwd.probs[t * v_dim..(t + 1) * v_dim];
        let target = prep.tokens[t] as usize;
        let mut dz = pt.to_vec();
        dz[target] -= 1.0;
        for z in dz.iter_mut() {
            *z *= ce_scale;
        }
        outer_acc(
            &mut grads[layout.out_w.clone()],
            &dz,
            &fwd.hidden[t * w..(t + 1) * w],
        );
        add_acc(&mut grads[layout.out_b.clone()], &dz);
        matvec_t_acc(
            &mut d_hidden[t * w..(t + 1) * w],
            &p[layout.out_w.clone()],
            &dz,
        );
    }

    // Rotation head.
    if !fwd.rot_sites.is_empty() {
        let scale = wr / fwd.rot_sites.len() as f64;
        for site in &fwd.rot_sites {
            let t = site.pos;
            let mut d9 = rotation_loss_grad(&site.pred9, &site.target);
            for g in d9.iter_mut() {
                *g *= scale;
            }
            outer_acc(&mut grads[layout.rot_w2.clone()], &d9, &site.rg);
            add_acc(&mut grads[layout.rot_b2.clone()], &d9);
            let mut d_rg = vec![0.0; cfg.rot_hidden];
            matvec_t_acc(&mut d_rg, &p[layout.rot_w2.clone()], &d9);
            let d_r1: Vec<f64> = d_rg
                .iter()
                .zip(&site.r1)
                .map(|(&g, &x)| g * gelu_deriv(x))
                .collect();
            outer_acc(
                &mut grads[layout.rot_w1.clone()],
                &d_r1,
                &fwd.hidden[t * w..(t + 1) * w],
            );
            add_acc(&mut grads[layout.rot_b1.clone()], &d_r1);
            matvec_t_acc(
                &mut d_hidden[t * w..(t + 1) * w],
                &p[layout.rot_w1.clone()],
                &d_r1,
            );
        }
    }

    // Embedding head.
    if !fwd.clip_sites.is_empty() {
        let scale = wk2 / fwd.clip_sites.len() as f64;
        for site in &fwd.clip_sites {
            let t = site.pos;
            let mut dd = cosine_embedding_loss_grad(&site.pred, &site.target, cfg.lambda);
            for g in dd.iter_mut() {
                *g *= scale;
            }
            outer_acc(
                &mut grads[layout.clip_w.clone()],
                &dd,
                &fwd.hidden[t * w..(t + 1) * w],
            );
            add_acc(&mut grads[layout.clip_b.clone()], &dd);
            matvec_t_acc(
                &mut d_hidden[t * w..(t + 1) * w],
                &p[layout.clip_w.clone()],
                &dd,
            );
        }
    }

    // Final norm.
    let mut d_x = vec![0.0f64; t_len * w];
    for t in 0..t_len {
        rms_bwd(
            &d_hidden[t * w..(t + 1) * w],
            &fwd.x_final[t * w..(t + 1) * w],
            &mut d_x[t * w..(t + 1) * w],
        );
    }

    // Layers, reversed.
    for (li, ls) in layout.layers.iter().enumerate().rev() {
        let cache = &fwd.layers[li];
        let w4 = 4 * w;

        // MLP block: x_out = x_mid + fc2 * gelu(fc1 * n2 + b1) + b2.
        let mut d_x_mid = d_x.clone(); // residual path
        for t in 0..t_len {
            let dxo = &d_x[t * w..(t + 1) * w];
            let gt = &cache.g[t * w4..(t + 1) * w4];
            outer_acc(&mut grads[ls.fc2.clone()], dxo, gt);
            add_acc(&mut grads[ls.fc2_b.clone()], dxo);
            let mut d_g = vec![0.0; w4];
            matvec_t_acc(&mut d_g, &p[ls.fc2.clone()], dxo);
            let f1t = &cache.f1[t * w4..(t + 1) * w4];
            let d_f1: Vec<f64> = d_g
                .iter()
                .zip(f1t)
                .map(|(&g, &x)| g * gelu_deriv(x))
                .collect();
            let n2t = &cache.n2[t * w..(t + 1) * w];
            outer_acc(&mut grads[ls.fc1.clone()], &d_f1, n2t);
            add_acc(&mut grads[ls.fc1_b.clone()], &d_f1);
            let mut d_n2 = vec![0.0; w];
            matvec_t_acc(&mut d_n2, &p[ls.fc1.clone()], &d_f1);
            rms_bwd(
                &d_n2,
                &cache.x_mid[t * w..(t + 1) * w],
                &mut d_x_mid[t * w..(t + 1) * w],
            );
        }

        // Attention block: x_mid = x_in + wo * att_o.
        let mut d_x_in = d_x_mid.clone(); // residual path
        let mut d_att_o = vec![0.0; t_len * w];
        for t in 0..t_len {
            let dxm = &d_x_mid[t * w..(t + 1) * w];
            outer_acc(
                &mut grads[ls.wo.clone()],
                dxm,
                &cache.att_o[t * w..(t + 1) * w],
            );
            matvec_t_acc(&mut d_att_o[t * w..(t + 1) * w], &p[ls.wo.clone()], dxm);
        }

        let mut d_q = vec![0.0; t_len * w];
        let mut d_k = vec![0.0; t_len * w];
        let mut d_v = vec![0.0; t_len * w];
        for h in 0..heads {
            let hoff = h * dh;
            for t in 0..t_len {
                let row =
                    &cache.att_w[h * t_len * t_len + t * t_len..h * t_len * t_len + t * t_len + t + 1];
                let d_ot = &d_att_o[t * w + hoff..t * w + hoff + dh];
                // d_a[j] = d_ot . v_j ; d_v_j += a_j d_ot
                let mut d_a = vec![0.0; t + 1];
                for (j, (da, &a)) in d_a.iter_mut().zip(row).enumerate() {
                    let vj = &cache.v[j * w + hoff..j * w + hoff + dh];
                    let mut dot = 0.0;
                    let dvj = &mut d_v[j * w + hoff..j * w + hoff + dh];
                    for d in 0..dh {
                        dot += d_ot[d] * vj[d];
                        dvj[d] += a * d_ot[d];
                    }
                    *da = dot;
                }
                // Softmax backward.
                let inner: f64 = d_a.iter().zip(row).map(|(da, &a)| da * a).sum();
                let qt = &cache.q[t * w + hoff..t * w + hoff + dh];
                let dqt = &mut d_q[t * w + hoff..t * w + hoff + dh];
                for j in 0..=t {
                    let ds = row[j] * (d_a[j] - inner) * inv_sqrt;
                    if ds == 0.0 {
                        continue;
                    }
                    let kj = &cache.k[j * w + hoff..j * w + hoff + dh];
                    let dkj = &mut d_k[j * w + hoff..j * w + hoff + dh];
                    for d in 0..dh {
                        dqt[d] += ds * kj[d];
                        dkj[d] += ds * qt[d];
                    }
                }
            }
        }

        for t in 0..t_len {
            let n1t = &cache.n1[t * w..(t + 1) * w];
            let mut d_n1 = vec![0.0; w];
            let dqt = &d_q[t * w..(t + 1) * w];
            let dkt = &d_k[t * w..(t + 1) * w];
            let dvt = &d_v[t * w..(t + 1) * w];
            outer_acc(&mut grads[ls.wq.clone()], dqt, n1t);
            outer_acc(&mut grads[ls.wk.clone()], dkt, n1t);
            outer_acc(&mut grads[ls.wv.clone()], dvt, n1t);
            matvec_t_acc(&mut d_n1, &p[ls.wq.clone()], dqt);
            matvec_t_acc(&mut d_n1, &p[ls.wk.clone()], dkt);
            matvec_t_acc(&mut d_n1, &p[ls.wv.clone()], dvt);
            rms_bwd(
                &d_n1,
                &cache.x_in[t * w..(t + 1) * w],
                &mut d_x_in[t * w..(t + 1) * w],
            );
        }

        d_x = d_x_in;
    }

    // Embedding backward.
    for t in 0..t_len {
        let dxt = &d_x[t * w..(t + 1) * w];
        add_acc(
            &mut grads[layout.pos_emb.clone()][t * w..(t + 1) * w],
            dxt,
        );
        if t == 0 {
            outer_acc(&mut grads[layout.feat_w.clone()], dxt, &prep.feat);
            add_acc(&mut grads[layout.feat_b.clone()], dxt);
        } else {
            let prev = prep.tokens[t - 1] as usize;
            add_acc(
                &mut grads[layout.tok_emb.clone()][prev * w..(prev + 1) * w],
                dxt,
            );
            match prep.input_payload[t] {
                Some(SlotPayload::Rot(m)) => {
                    let m9: Vec<f64> = m.iter().map(|&x| f64::from(x)).collect();
                    outer_acc(&mut grads[layout.rot_in.clone()], dxt, &m9);
                }
                Some(SlotPayload::Clip(c)) => {
                    let cd: Vec<f64> = c.iter().map(|&x| f64::from(x)).collect();
                    outer_acc(&mut grads[layout.clip_in.clone()], dxt, &cd);
                }
                None => {}
            }
        }
    }

    grads
}

/// Teacher-forced loss components for one (features, stream) pair.
pub fn teacher_forced_loss(
    state: &TrainState,
    features: &[f32],
    stream: &HybridTokenStream,
) -> Result<LossBreakdown, DecoderError> {
    let prep = prepare(&state.cfg, features, stream)?;
    Ok(forward(state, &prep).breakdown)
}

/// Loss plus the full analytic gradient, ready for an optimizer step.
pub(crate) fn loss_and_grad(
    state: &TrainState,
    features: &[f32],
    stream: &HybridTokenStream,
) -> Result<(LossBreakdown, Vec<f64>), DecoderError> {
    let prep = prepare(&state.cfg, features, stream)?;
    let fwd = forward(state, &prep);
    let grads = backward(state, &prep, &fwd);
    Ok((fwd.breakdown, grads))
}

/// The per-site rotation predictions of one forward pass; used by the
/// gradient checker to exclude SVD-degenerate configurations.
pub(crate) fn rot_predictions(
    state: &TrainState,
    features: &[f32],
    stream: &HybridTokenStream,
) -> Result<Vec<[f64; 9]>, DecoderError> {
    let prep = prepare(&state.cfg, features, stream)?;
    let fwd = forward(state, &prep);
    Ok(fwd.rot_sites.iter().map(|s| s.pred9).collect())
}
