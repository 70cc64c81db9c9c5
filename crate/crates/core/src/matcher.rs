//! Transformer matcher: alternating self/cross attention over the two days'
//! feature sets, pairwise scores, per-fruitlet matchability, the dual-softmax
//! partial assignment, mutual-argmax correspondence extraction, and the
//! per-layer matching loss.
//!
//! Pre-layer-norm blocks. Self and cross attention use shared weights for
//! both days; cross attention updates both days simultaneously from the
//! pre-update features. Score and matchability heads are separate per layer
//! so intermediate layers can be supervised; inference reads the last layer.

use crate::autodiff::params::{init_uniform, Bind, ParamStore};
use crate::autodiff::{dropout_key, Tape, TensorId};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherConfig {
    pub layers: usize,
    pub heads: usize,
    pub feature_dim: usize,
    pub ffn_dim: usize,
    pub dropout: f32,
    pub match_threshold: f32,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            heads: 8,
            feature_dim: 256,
            ffn_dim: 1024,
            dropout: 0.1,
            match_threshold: 0.1,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 {
            return Err(Error::Config("matcher needs at least one layer and one head".into()));
        }
        if self.feature_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "feature_dim {} must be divisible by heads {}",
                self.feature_dim, self.heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.match_threshold) || self.match_threshold == 0.0 {
            return Err(Error::Config(format!(
                "match_threshold {} outside (0, 1)",
                self.match_threshold
            )));
        }
        Ok(())
    }
}

/// Dropout seeding for one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardCtx {
    pub training: bool,
    pub seed: u64,
    pub step: u64,
    pub sample: u64,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self { training: false, seed: 0, step: 0, sample: 0 }
    }

    pub fn train(seed: u64, step: u64, sample: u64) -> Self {
        Self { training: true, seed, step, sample }
    }

    fn key(&self, site: u64) -> u64 {
        dropout_key(self.seed, site, self.step, self.sample)
    }
}

/// One-to-one correspondences plus the leftovers on each side.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CorrespondenceSet {
    pub matches: Vec<(usize, usize)>,
    pub unmatched_t: Vec<usize>,
    pub unmatched_t1: Vec<usize>,
}

impl CorrespondenceSet {
    /// Build from explicit matches, validating the one-to-one constraint and
    /// completing the unmatched partitions.
    pub fn new(matches: Vec<(usize, usize)>, m: usize, n: usize) -> Result<Self> {
        let mut used_i = vec![false; m];
        let mut used_j = vec![false; n];
        for &(i, j) in &matches {
            if i >= m || j >= n {
                return Err(Error::Data {
                    line: 0,
                    path: "gt_matches".into(),
                    message: format!("match ({i}, {j}) out of range ({m} x {n})"),
                });
            }
            if used_i[i] || used_j[j] {
                return Err(Error::Data {
                    line: 0,
                    path: "gt_matches".into(),
                    message: format!("index repeated in match ({i}, {j})"),
                });
            }
            used_i[i] = true;
            used_j[j] = true;
        }
        let mut matches = matches;
        matches.sort_unstable();
        Ok(Self {
            matches,
            unmatched_t: (0..m).filter(|&i| !used_i[i]).collect(),
            unmatched_t1: (0..n).filter(|&j| !used_j[j]).collect(),
        })
    }

    pub fn len_t(&self) -> usize {
        self.matches.len() + self.unmatched_t.len()
    }

    pub fn len_t1(&self) -> usize {
        self.matches.len() + self.unmatched_t1.len()
    }
}

pub fn init_matcher_params(cfg: &MatcherConfig, seed: u64) -> ParamStore {
    let d = cfg.feature_dim;
    let f = cfg.ffn_dim;
    let mut store = ParamStore::new();
    let lin = |store: &mut ParamStore, name: String, rows: usize, cols: usize| {
        store.insert(&format!("{name}_w"), vec![rows, cols], init_uniform(seed, &format!("{name}_w"), rows, rows * cols));
        store.insert(&format!("{name}_b"), vec![cols], init_uniform(seed, &format!("{name}_b"), rows, cols));
    };
    let ln = |store: &mut ParamStore, name: String| {
        store.insert(&format!("{name}_gamma"), vec![d], vec![1.0; d]);
        store.insert(&format!("{name}_beta"), vec![d], vec![0.0; d]);
    };
    for i in 0..cfg.layers {
        for block in ["self", "cross"] {
            ln(&mut store, format!("l{i}_{block}_ln1"));
            for proj in ["q", "k", "v", "o"] {
                lin(&mut store, format!("l{i}_{block}_{proj}"), d, d);
            }
            ln(&mut store, format!("l{i}_{block}_ln2"));
            lin(&mut store, format!("l{i}_{block}_ffn1"), d, f);
            lin(&mut store, format!("l{i}_{block}_ffn2"), f, d);
        }
        lin(&mut store, format!("head{i}_score"), d, d);
        lin(&mut store, format!("head{i}_match"), d, 1);
    }
    store
}

fn multi_head_attention(
    tape: &mut Tape,
    bind: &mut Bind,
    cfg: &MatcherConfig,
    prefix: &str,
    q_in: TensorId,
    kv_in: TensorId,
) -> Result<TensorId> {
    let d = cfg.feature_dim;
    let hd = d / cfg.heads;
    let qw = bind.get(tape, &format!("{prefix}_q_w"))?;
    let qb = bind.get(tape, &format!("{prefix}_q_b"))?;
    let kw = bind.get(tape, &format!("{prefix}_k_w"))?;
    let kb = bind.get(tape, &format!("{prefix}_k_b"))?;
    let vw = bind.get(tape, &format!("{prefix}_v_w"))?;
    let vb = bind.get(tape, &format!("{prefix}_v_b"))?;
    let q = tape.linear(q_in, qw, qb)?;
    let k = tape.linear(kv_in, kw, kb)?;
    let v = tape.linear(kv_in, vw, vb)?;

    let scale = 1.0 / (hd as f32).sqrt();
    let mut heads = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let (lo, hi) = (h * hd, (h + 1) * hd);
        let qh = tape.slice_cols(q, lo, hi)?;
        let kh = tape.slice_cols(k, lo, hi)?;
        let vh = tape.slice_cols(v, lo, hi)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, scale);
        let attn = tape.softmax(scores, 1)?;
        heads.push(tape.matmul(attn, vh)?);
    }
    let merged = tape.concat(&heads, 1)?;
    let ow = bind.get(tape, &format!("{prefix}_o_w"))?;
    let ob = bind.get(tape, &format!("{prefix}_o_b"))?;
    tape.linear(merged, ow, ob)
}

/// Pre-norm attention block plus its feed-forward half:
/// `x += Drop(MHA(LN(x), LN(kv)))`, then `x += Drop(FFN(LN(x)))`.
#[allow(clippy::too_many_arguments)]
fn attn_ffn_block(
    tape: &mut Tape,
    bind: &mut Bind,
    cfg: &MatcherConfig,
    prefix: &str,
    x: TensorId,
    kv: TensorId,
    ctx: &ForwardCtx,
    site: u64,
) -> Result<TensorId> {
    let g1 = bind.get(tape, &format!("{prefix}_ln1_gamma"))?;
    let b1 = bind.get(tape, &format!("{prefix}_ln1_beta"))?;
    let xn = tape.layer_norm(x, g1, b1)?;
    let kvn = if kv == x { xn } else { tape.layer_norm(kv, g1, b1)? };
    let h = multi_head_attention(tape, bind, cfg, prefix, xn, kvn)?;
    let h = tape.dropout(h, cfg.dropout, ctx.training, ctx.key(site));
    let x = tape.add(x, h)?;

    let g2 = bind.get(tape, &format!("{prefix}_ln2_gamma"))?;
    let b2 = bind.get(tape, &format!("{prefix}_ln2_beta"))?;
    let xn = tape.layer_norm(x, g2, b2)?;
    let w1 = bind.get(tape, &format!("{prefix}_ffn1_w"))?;
    let bb1 = bind.get(tape, &format!("{prefix}_ffn1_b"))?;
    let w2 = bind.get(tape, &format!("{prefix}_ffn2_w"))?;
    let bb2 = bind.get(tape, &format!("{prefix}_ffn2_b"))?;
    let f = tape.linear(xn, w1, bb1)?;
    let f = tape.relu(f);
    let f = tape.linear(f, w2, bb2)?;
    let f = tape.dropout(f, cfg.dropout, ctx.training, ctx.key(site + 1));
    tape.add(x, f)
}

/// One encoder layer: self attention within each day, then cross attention
/// where both days attend to the other's pre-update features.
pub fn encoder_layer(
    tape: &mut Tape,
    bind: &mut Bind,
    cfg: &MatcherConfig,
    layer: usize,
    x_t: TensorId,
    x_t1: TensorId,
    ctx: &ForwardCtx,
) -> Result<(TensorId, TensorId)> {
    let m = tape.shape(x_t)[0];
    let n = tape.shape(x_t1)[0];
    let self_p = format!("l{layer}_self");
    let cross_p = format!("l{layer}_cross");
    let base = layer as u64 * 16;

    let s_t = if m > 0 {
        attn_ffn_block(tape, bind, cfg, &self_p, x_t, x_t, ctx, base)?
    } else {
        x_t
    };
    let s_t1 = if n > 0 {
        attn_ffn_block(tape, bind, cfg, &self_p, x_t1, x_t1, ctx, base + 2)?
    } else {
        x_t1
    };

    // Cross attention is identity when the counterpart is empty.
    let c_t = if m > 0 && n > 0 {
        attn_ffn_block(tape, bind, cfg, &cross_p, s_t, s_t1, ctx, base + 4)?
    } else {
        s_t
    };
    let c_t1 = if m > 0 && n > 0 {
        attn_ffn_block(tape, bind, cfg, &cross_p, s_t1, s_t, ctx, base + 6)?
    } else {
        s_t1
    };
    Ok((c_t, c_t1))
}

/// All encoder layers; returns the feature pair after every layer.
pub fn encoder_forward(
    tape: &mut Tape,
    bind: &mut Bind,
    cfg: &MatcherConfig,
    x_t: TensorId,
    x_t1: TensorId,
    ctx: &ForwardCtx,
) -> Result<Vec<(TensorId, TensorId)>> {
    let mut outputs = Vec::with_capacity(cfg.layers);
    let (mut t, mut t1) = (x_t, x_t1);
    for layer in 0..cfg.layers {
        let (nt, nt1) = encoder_layer(tape, bind, cfg, layer, t, t1, ctx)?;
        outputs.push((nt, nt1));
        t = nt;
        t1 = nt1;
    }
    Ok(outputs)
}

/// Pairwise scores: a shared linear projection on both sides, then scaled
/// dot products, `S_ij = proj(x_i) . proj(x_j) / sqrt(d)`.
pub fn score_matrix(
    tape: &mut Tape,
    bind: &mut Bind,
    cfg: &MatcherConfig,
    layer: usize,
    x_t: TensorId,
    x_t1: TensorId,
) -> Result<TensorId> {
    let w = bind.get(tape, &format!("head{layer}_score_w"))?;
    let b = bind.get(tape, &format!("head{layer}_score_b"))?;
    let pt = tape.linear(x_t, w, b)?;
    let pt1 = tape.linear(x_t1, w, b)?;
    let pt1t = tape.transpose(pt1)?;
    let s = tape.matmul(pt, pt1t)?;
    Ok(tape.scale(s, 1.0 / (cfg.feature_dim as f32).sqrt()))
}

/// Per-fruitlet matchability: sigmoid of a shared linear map, `[m, 1]`.
pub fn matchability(
    tape: &mut Tape,
    bind: &mut Bind,
    layer: usize,
    x: TensorId,
) -> Result<TensorId> {
    let w = bind.get(tape, &format!("head{layer}_match_w"))?;
    let b = bind.get(tape, &format!("head{layer}_match_b"))?;
    let logits = tape.linear(x, w, b)?;
    Ok(tape.sigmoid(logits))
}

/// Dual-softmax partial assignment:
/// `P_ij = sigma_t_i * sigma_t1_j * rowsoftmax(S)_ij * colsoftmax(S)_ij`.
pub fn partial_assignment(
    tape: &mut Tape,
    s: TensorId,
    sigma_t: TensorId,
    sigma_t1: TensorId,
) -> Result<TensorId> {
    let (m, n) = (tape.shape(s)[0], tape.shape(s)[1]);
    if tape.shape(sigma_t) != [m, 1] || tape.shape(sigma_t1) != [n, 1] {
        return Err(Error::Shape(format!(
            "partial_assignment: S [{m}, {n}] vs sigma {:?} / {:?}",
            tape.shape(sigma_t),
            tape.shape(sigma_t1)
        )));
    }
    let rows = tape.softmax(s, 1)?;
    let cols = tape.softmax(s, 0)?;
    let both = tape.mul(rows, cols)?;
    let s1t = tape.transpose(sigma_t1)?;
    let outer = tape.matmul(sigma_t, s1t)?;
    tape.mul(both, outer)
}

/// Per-layer score/matchability/assignment from one layer's features.
pub fn match_heads(
    tape: &mut Tape,
    bind: &mut Bind,
    cfg: &MatcherConfig,
    layer: usize,
    x_t: TensorId,
    x_t1: TensorId,
) -> Result<LayerMatch> {
    let s = score_matrix(tape, bind, cfg, layer, x_t, x_t1)?;
    let sigma_t = matchability(tape, bind, layer, x_t)?;
    let sigma_t1 = matchability(tape, bind, layer, x_t1)?;
    let p = partial_assignment(tape, s, sigma_t, sigma_t1)?;
    Ok(LayerMatch { scores: s, sigma_t, sigma_t1, assignment: p })
}

#[derive(Debug, Clone, Copy)]
pub struct LayerMatch {
    pub scores: TensorId,
    pub sigma_t: TensorId,
    pub sigma_t1: TensorId,
    pub assignment: TensorId,
}

/// Hard matches: `(i, j)` is kept iff `P_ij` is the strict maximum of row i
/// and of column j and exceeds the threshold. Exact float ties produce no
/// match.
pub fn extract_matches(p: &[f32], m: usize, n: usize, threshold: f32) -> CorrespondenceSet {
    debug_assert_eq!(p.len(), m * n);
    let mut matches = Vec::new();
    for i in 0..m {
        for j in 0..n {
            let v = p[i * n + j];
            if v <= threshold {
                continue;
            }
            let row_strict = (0..n).all(|k| k == j || p[i * n + k] < v);
            let col_strict = (0..m).all(|l| l == i || p[l * n + j] < v);
            if row_strict && col_strict {
                matches.push((i, j));
            }
        }
    }
    // Mutual strict maxima are unique per row and column by construction.
    CorrespondenceSet::new(matches, m, n).expect("mutual strict maxima are one-to-one")
}

/// The matching loss, averaged over layers:
/// mean log P over ground-truth matches, plus half-weighted mean
/// log(1 - sigma) over each side's unmatched set. Empty sets contribute
/// nothing. Logs are clamped at 1e-7.
pub fn match_loss(
    tape: &mut Tape,
    per_layer: &[LayerMatch],
    gt: &CorrespondenceSet,
) -> Result<TensorId> {
    if per_layer.is_empty() {
        return Err(Error::Shape("match_loss: no layers".into()));
    }
    let (m, n) = {
        let s = tape.shape(per_layer[0].assignment);
        (s[0], s[1])
    };
    for &(i, j) in &gt.matches {
        if i >= m || j >= n {
            return Err(Error::Data {
                line: 0,
                path: "gt_matches".into(),
                message: format!("match ({i}, {j}) out of range ({m} x {n})"),
            });
        }
    }
    if gt.unmatched_t.iter().any(|&i| i >= m) || gt.unmatched_t1.iter().any(|&j| j >= n) {
        return Err(Error::Data {
            line: 0,
            path: "gt_unmatched".into(),
            message: format!("unmatched index out of range ({m} x {n})"),
        });
    }

    let mut terms: Vec<TensorId> = Vec::new();
    let layers = per_layer.len() as f32;
    for lm in per_layer {
        if !gt.matches.is_empty() {
            let mut mask = vec![0.0f32; m * n];
            for &(i, j) in &gt.matches {
                mask[i * n + j] = 1.0;
            }
            let mk = tape.constant(vec![m, n], mask);
            let pc = tape.clamp(lm.assignment, 1e-7, 1.0);
            let logp = tape.log(pc);
            let sel = tape.mul(logp, mk)?;
            let tot = tape.sum(sel);
            terms.push(tape.scale(tot, 1.0 / gt.matches.len() as f32));
        }
        for (unmatched, sigma, len) in [
            (&gt.unmatched_t, lm.sigma_t, m),
            (&gt.unmatched_t1, lm.sigma_t1, n),
        ] {
            if unmatched.is_empty() {
                continue;
            }
            let mut mask = vec![0.0f32; len];
            for &i in unmatched.iter() {
                mask[i] = 1.0;
            }
            let mk = tape.constant(vec![len, 1], mask);
            let one_minus = tape.affine(sigma, -1.0, 1.0);
            let omc = tape.clamp(one_minus, 1e-7, 1.0);
            let lg = tape.log(omc);
            let sel = tape.mul(lg, mk)?;
            let tot = tape.sum(sel);
            terms.push(tape.scale(tot, 1.0 / (2.0 * unmatched.len() as f32)));
        }
    }
    if terms.is_empty() {
        // Degenerate supervision: nothing matched and nothing unmatched.
        return Ok(tape.constant(vec![1], vec![0.0]));
    }
    let mut acc = terms[0];
    for &t in &terms[1..] {
        acc = tape.add(acc, t)?;
    }
    Ok(tape.scale(acc, -1.0 / layers))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::params::ParamBinding;

    fn small_cfg() -> MatcherConfig {
        MatcherConfig {
            layers: 2,
            heads: 2,
            feature_dim: 8,
            ffn_dim: 16,
            dropout: 0.0,
            match_threshold: 0.1,
        }
    }

    struct TestRng(u64);

    impl TestRng {
        fn vec(&mut self, n: usize) -> Vec<f32> {
            (0..n)
                .map(|_| {
                    self.0 ^= self.0 << 13;
                    self.0 ^= self.0 >> 7;
                    self.0 ^= self.0 << 17;
                    ((self.0 >> 40) as f32 / (1u64 << 24) as f32) * 2.0 - 1.0
                })
                .collect()
        }
    }

    #[test]
    fn config_validation() {
        assert!(MatcherConfig::default().validate().is_ok());
        let mut bad = MatcherConfig::default();
        bad.feature_dim = 250; // not divisible by 8
        assert!(bad.validate().is_err());
    }

    #[test]
    fn single_token_layer_is_finite_and_deterministic() {
        let cfg = small_cfg();
        let params = init_matcher_params(&cfg, 4);
        let run = || {
            let mut tape = Tape::new();
            let mut binding = ParamBinding::new();
            let mut bind = Bind::new(&params, &mut binding, false, "");
            let x_t = tape.constant(vec![1, 8], (0..8).map(|i| 0.1 * i as f32).collect());
            let x_t1 = tape.constant(vec![1, 8], (0..8).map(|i| -0.05 * i as f32).collect());
            let (a, b) =
                encoder_layer(&mut tape, &mut bind, &cfg, 0, x_t, x_t1, &ForwardCtx::eval())
                    .unwrap();
            (tape.data(a).to_vec(), tape.data(b).to_vec())
        };
        let (a1, b1) = run();
        let (a2, b2) = run();
        assert!(a1.iter().chain(&b1).all(|v| v.is_finite()));
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn empty_side_passes_through() {
        let cfg = small_cfg();
        let params = init_matcher_params(&cfg, 4);
        let mut tape = Tape::new();
        let mut binding = ParamBinding::new();
        let mut bind = Bind::new(&params, &mut binding, false, "");
        let x_t = tape.constant(vec![2, 8], vec![0.3; 16]);
        let x_t1 = tape.constant(vec![0, 8], vec![]);
        let (a, b) =
            encoder_layer(&mut tape, &mut bind, &cfg, 0, x_t, x_t1, &ForwardCtx::eval()).unwrap();
        assert_eq!(tape.shape(a), &[2, 8]);
        assert_eq!(tape.shape(b), &[0, 8]);
        assert!(tape.data(a).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn layer_is_permutation_equivariant() {
        let cfg = small_cfg();
        let params = init_matcher_params(&cfg, 9);
        let mut rng = TestRng(31);
        let xt = rng.vec(3 * 8);
        let xt1 = rng.vec(4 * 8);
        let perm = [2usize, 0, 1];
        let xt_perm: Vec<f32> = perm.iter().flat_map(|&i| xt[i * 8..(i + 1) * 8].to_vec()).collect();

        let forward = |t_data: Vec<f32>| {
            let mut tape = Tape::new();
            let mut binding = ParamBinding::new();
            let mut bind = Bind::new(&params, &mut binding, false, "");
            let x_t = tape.constant(vec![3, 8], t_data);
            let x_t1 = tape.constant(vec![4, 8], xt1.clone());
            let (a, _) =
                encoder_layer(&mut tape, &mut bind, &cfg, 0, x_t, x_t1, &ForwardCtx::eval())
                    .unwrap();
            tape.data(a).to_vec()
        };
        let base = forward(xt.clone());
        let permuted = forward(xt_perm);
        for (new_row, &old_row) in perm.iter().enumerate() {
            for c in 0..8 {
                let a = base[old_row * 8 + c];
                let b = permuted[new_row * 8 + c];
                assert!((a - b).abs() < 1e-5, "row {old_row} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn score_matrix_identical_features_is_constant() {
        let cfg = small_cfg();
        let mut params = ParamStore::new();
        // Identity projection.
        let mut eye = vec![0.0f32; 64];
        for i in 0..8 {
            eye[i * 8 + i] = 1.0;
        }
        params.insert("head0_score_w", vec![8, 8], eye);
        params.insert("head0_score_b", vec![8], vec![0.0; 8]);

        let mut tape = Tape::new();
        let mut binding = ParamBinding::new();
        let mut bind = Bind::new(&params, &mut binding, false, "");
        let u = vec![0.5f32, -0.25, 1.0, 0.0, 0.75, -0.5, 0.25, 0.1];
        let row2: Vec<f32> = u.iter().chain(u.iter()).copied().collect();
        let x_t = tape.constant(vec![2, 8], row2.clone());
        let x_t1 = tape.constant(vec![2, 8], row2);
        let s = score_matrix(&mut tape, &mut bind, &cfg, 0, x_t, x_t1).unwrap();
        let norm2: f32 = u.iter().map(|v| v * v).sum();
        let expect = norm2 / (8.0f32).sqrt();
        for v in tape.data(s) {
            assert!((v - expect).abs() < 1e-6, "{v} vs {expect}");
        }
    }

    #[test]
    fn score_matrix_orthogonal_features_vanish_off_diagonal() {
        let cfg = small_cfg();
        let mut params = ParamStore::new();
        let mut eye = vec![0.0f32; 64];
        for i in 0..8 {
            eye[i * 8 + i] = 1.0;
        }
        params.insert("head0_score_w", vec![8, 8], eye);
        params.insert("head0_score_b", vec![8], vec![0.0; 8]);

        let mut tape = Tape::new();
        let mut binding = ParamBinding::new();
        let mut bind = Bind::new(&params, &mut binding, false, "");
        // Orthogonal one-hot rows.
        let mut data = vec![0.0f32; 2 * 8];
        data[0] = 1.0;
        data[8 + 1] = 1.0;
        let x_t = tape.constant(vec![2, 8], data.clone());
        let x_t1 = tape.constant(vec![2, 8], data);
        let s = score_matrix(&mut tape, &mut bind, &cfg, 0, x_t, x_t1).unwrap();
        let d = tape.data(s);
        assert!((d[0] - 1.0 / (8.0f32).sqrt()).abs() < 1e-6);
        assert_eq!(d[1], 0.0);
        assert_eq!(d[2], 0.0);
    }

    #[test]
    fn score_matrix_matches_bruteforce_oracle() {
        let cfg = small_cfg();
        let params = init_matcher_params(&cfg, 21);
        let mut rng = TestRng(77);
        let xt = rng.vec(3 * 8);
        let xt1 = rng.vec(4 * 8);

        let mut tape = Tape::new();
        let mut binding = ParamBinding::new();
        let mut bind = Bind::new(&params, &mut binding, false, "");
        let x_t = tape.constant(vec![3, 8], xt.clone());
        let x_t1 = tape.constant(vec![4, 8], xt1.clone());
        let s = score_matrix(&mut tape, &mut bind, &cfg, 0, x_t, x_t1).unwrap();

        let w = &params.get("head0_score_w").unwrap().data;
        let b = &params.get("head0_score_b").unwrap().data;
        let project = |x: &[f32]| -> Vec<f64> {
            (0..8)
                .map(|j| {
                    let mut acc = b[j] as f64;
                    for i in 0..8 {
                        acc += x[i] as f64 * w[i * 8 + j] as f64;
                    }
                    acc
                })
                .collect()
        };
        for i in 0..3 {
            for j in 0..4 {
                let pi = project(&xt[i * 8..(i + 1) * 8]);
                let pj = project(&xt1[j * 8..(j + 1) * 8]);
                let dot: f64 = pi.iter().zip(&pj).map(|(a, b)| a * b).sum();
                let expect = dot / (8.0f64).sqrt();
                let got = tape.data(s)[i * 4 + j] as f64;
                assert!((got - expect).abs() < 1e-6, "S[{i},{j}] {got} vs {expect}");
            }
        }
    }

    #[test]
    fn matchability_zero_params_is_half_and_bias_saturates() {
        let mut params = ParamStore::new();
        params.insert("head0_match_w", vec![8, 1], vec![0.0; 8]);
        params.insert("head0_match_b", vec![1], vec![0.0]);
        let mut tape = Tape::new();
        let mut binding = ParamBinding::new();
        let mut bind = Bind::new(&params, &mut binding, false, "");
        let x = tape.constant(vec![3, 8], vec![0.7; 24]);
        let sig = matchability(&mut tape, &mut bind, 0, x).unwrap();
        assert!(tape.data(sig).iter().all(|&v| v == 0.5));

        let mut params = ParamStore::new();
        params.insert("head0_match_w", vec![8, 1], vec![0.0; 8]);
        params.insert("head0_match_b", vec![1], vec![20.0]);
        let mut binding = ParamBinding::new();
        let mut bind = Bind::new(&params, &mut binding, false, "");
        let sig = matchability(&mut tape, &mut bind, 0, x).unwrap();
        assert!(tape.data(sig).iter().all(|&v| (1.0 - v).abs() < 1e-8));
    }

    #[test]
    fn partial_assignment_trivial_cases() {
        let mut tape = Tape::new();
        let s = tape.constant(vec![1, 1], vec![3.7]);
        let st = tape.constant(vec![1, 1], vec![1.0]);
        let st1 = tape.constant(vec![1, 1], vec![1.0]);
        let p = partial_assignment(&mut tape, s, st, st1).unwrap();
        assert!((tape.data(p)[0] - 1.0).abs() < 1e-7);

        let s = tape.constant(vec![2, 2], vec![0.4; 4]);
        let st = tape.constant(vec![2, 1], vec![1.0; 2]);
        let st1 = tape.constant(vec![2, 1], vec![1.0; 2]);
        let p = partial_assignment(&mut tape, s, st, st1).unwrap();
        for v in tape.data(p) {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn partial_assignment_matches_scalar_oracle() {
        let mut rng = TestRng(55);
        let (m, n) = (4, 5);
        let s_data = rng.vec(m * n);
        let sig_t: Vec<f32> = rng.vec(m).iter().map(|v| 0.5 + 0.49 * v).collect();
        let sig_t1: Vec<f32> = rng.vec(n).iter().map(|v| 0.5 + 0.49 * v).collect();

        let mut tape = Tape::new();
        let s = tape.constant(vec![m, n], s_data.clone());
        let st = tape.constant(vec![m, 1], sig_t.clone());
        let st1 = tape.constant(vec![n, 1], sig_t1.clone());
        let p = partial_assignment(&mut tape, s, st, st1).unwrap();

        // Scalar-loop oracle in f64.
        for i in 0..m {
            for j in 0..n {
                let row: Vec<f64> = (0..n).map(|k| s_data[i * n + k] as f64).collect();
                let col: Vec<f64> = (0..m).map(|l| s_data[l * n + j] as f64).collect();
                let rmax = row.iter().cloned().fold(f64::MIN, f64::max);
                let cmax = col.iter().cloned().fold(f64::MIN, f64::max);
                let rsum: f64 = row.iter().map(|v| (v - rmax).exp()).sum();
                let csum: f64 = col.iter().map(|v| (v - cmax).exp()).sum();
                let rsm = ((s_data[i * n + j] as f64) - rmax).exp() / rsum;
                let csm = ((s_data[i * n + j] as f64) - cmax).exp() / csum;
                let expect = sig_t[i] as f64 * sig_t1[j] as f64 * rsm * csm;
                let got = tape.data(p)[i * n + j] as f64;
                assert!((got - expect).abs() < 1e-6, "P[{i},{j}] {got} vs {expect}");
            }
        }
    }

    #[test]
    fn partial_assignment_bounds_hold() {
        let mut rng = TestRng(91);
        for _ in 0..50 {
            let (m, n) = (3, 4);
            let s_data: Vec<f32> = rng.vec(m * n).iter().map(|v| 4.0 * v).collect();
            let sig_t: Vec<f32> = rng.vec(m).iter().map(|v| 0.5 + 0.49 * v).collect();
            let sig_t1: Vec<f32> = rng.vec(n).iter().map(|v| 0.5 + 0.49 * v).collect();
            let mut tape = Tape::new();
            let s = tape.constant(vec![m, n], s_data);
            let st = tape.constant(vec![m, 1], sig_t.clone());
            let st1 = tape.constant(vec![n, 1], sig_t1.clone());
            let p = partial_assignment(&mut tape, s, st, st1).unwrap();
            let pd = tape.data(p);
            for i in 0..m {
                let mut row_sum = 0.0f32;
                for j in 0..n {
                    let v = pd[i * n + j];
                    assert!(v >= 0.0 && v <= sig_t[i] * sig_t1[j] + 1e-7);
                    row_sum += v;
                }
                assert!(row_sum <= sig_t[i] + 1e-6);
            }
            for j in 0..n {
                let col_sum: f32 = (0..m).map(|i| pd[i * n + j]).sum();
                assert!(col_sum <= sig_t1[j] + 1e-6);
            }
        }
    }

    #[test]
    fn extract_matches_examples() {
        let p = vec![0.9, 0.0, 0.0, 0.8];
        let set = extract_matches(&p, 2, 2, 0.1);
        assert_eq!(set.matches, vec![(0, 0), (1, 1)]);
        assert!(set.unmatched_t.is_empty() && set.unmatched_t1.is_empty());

        let p = vec![0.9, 0.85, 0.88, 0.8];
        let set = extract_matches(&p, 2, 2, 0.1);
        assert_eq!(set.matches, vec![(0, 0)]);
        assert_eq!(set.unmatched_t, vec![1]);
        assert_eq!(set.unmatched_t1, vec![1]);

        let p = vec![0.05, 0.04, 0.03, 0.02];
        let set = extract_matches(&p, 2, 2, 0.1);
        assert!(set.matches.is_empty());
        assert_eq!(set.unmatched_t, vec![0, 1]);
        assert_eq!(set.unmatched_t1, vec![0, 1]);
    }

    #[test]
    fn extract_matches_ties_produce_no_match() {
        // Row 0 is exactly tied: no strict row max, and the tied 0.5 values
        // also dominate both columns, so nothing survives.
        let p = vec![0.5, 0.5, 0.1, 0.2];
        let set = extract_matches(&p, 2, 2, 0.05);
        assert!(set.matches.is_empty());
        assert_eq!(set.unmatched_t, vec![0, 1]);

        // The tie only blocks its own row/column: a clean mutual max in the
        // remaining block still matches.
        let p = vec![0.5, 0.5, 0.0, 0.0, 0.0, 0.4];
        let set = extract_matches(&p, 2, 3, 0.05);
        assert_eq!(set.matches, vec![(1, 2)]);
    }

    #[test]
    fn match_loss_perfect_predictor_vanishes() {
        let mut tape = Tape::new();
        let gt = CorrespondenceSet::new(vec![(0, 0), (1, 1)], 3, 2).unwrap();
        let p = tape.constant(vec![3, 2], vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        let sig_t = tape.constant(vec![3, 1], vec![1.0, 1.0, 0.0]);
        let sig_t1 = tape.constant(vec![2, 1], vec![1.0, 1.0]);
        let lm = LayerMatch { scores: p, sigma_t: sig_t, sigma_t1: sig_t1, assignment: p };
        let loss = match_loss(&mut tape, &[lm], &gt).unwrap();
        assert!(tape.value(loss).abs() < 1e-5, "loss {}", tape.value(loss));
    }

    #[test]
    fn match_loss_single_match_analytic() {
        // One layer, one match with P = e^-1 and no unmatched: loss = 1.
        let mut tape = Tape::new();
        let gt = CorrespondenceSet::new(vec![(0, 0)], 1, 1).unwrap();
        let p = tape.constant(vec![1, 1], vec![(-1.0f32).exp()]);
        let sig = tape.constant(vec![1, 1], vec![0.9]);
        let lm = LayerMatch { scores: p, sigma_t: sig, sigma_t1: sig, assignment: p };
        let loss = match_loss(&mut tape, &[lm], &gt).unwrap();
        assert!((tape.value(loss) - 1.0).abs() < 1e-6, "loss {}", tape.value(loss));
    }

    #[test]
    fn match_loss_matches_scalar_oracle() {
        let mut rng = TestRng(13);
        let (m, n) = (4, 3);
        let gt = CorrespondenceSet::new(vec![(0, 1), (2, 0)], m, n).unwrap();

        let mut tape = Tape::new();
        let mut layers = Vec::new();
        let mut raw = Vec::new();
        for _ in 0..2 {
            let p_data: Vec<f32> = rng.vec(m * n).iter().map(|v| 0.01 + 0.49 * (v + 1.0)).collect();
            let st_data: Vec<f32> = rng.vec(m).iter().map(|v| 0.5 + 0.45 * v).collect();
            let st1_data: Vec<f32> = rng.vec(n).iter().map(|v| 0.5 + 0.45 * v).collect();
            let p = tape.constant(vec![m, n], p_data.clone());
            let st = tape.constant(vec![m, 1], st_data.clone());
            let st1 = tape.constant(vec![n, 1], st1_data.clone());
            layers.push(LayerMatch { scores: p, sigma_t: st, sigma_t1: st1, assignment: p });
            raw.push((p_data, st_data, st1_data));
        }
        let loss = match_loss(&mut tape, &layers, &gt).unwrap();

        let mut oracle = 0.0f64;
        for (p, st, st1) in &raw {
            let mut layer = 0.0f64;
            let mut msum = 0.0f64;
            for &(i, j) in &gt.matches {
                msum += (p[i * n + j] as f64).ln();
            }
            layer += msum / gt.matches.len() as f64;
            let mut asum = 0.0f64;
            for &i in &gt.unmatched_t {
                asum += (1.0 - st[i] as f64).ln();
            }
            layer += asum / (2.0 * gt.unmatched_t.len() as f64);
            let mut bsum = 0.0f64;
            for &j in &gt.unmatched_t1 {
                bsum += (1.0 - st1[j] as f64).ln();
            }
            layer += bsum / (2.0 * gt.unmatched_t1.len() as f64);
            oracle += layer;
        }
        oracle = -oracle / 2.0;
        assert!(
            (tape.value(loss) as f64 - oracle).abs() < 1e-5,
            "{} vs oracle {oracle}",
            tape.value(loss)
        );
    }

    #[test]
    fn match_loss_rejects_out_of_range_gt() {
        let mut tape = Tape::new();
        let p = tape.constant(vec![2, 2], vec![0.2; 4]);
        let sig = tape.constant(vec![2, 1], vec![0.5; 2]);
        let lm = LayerMatch { scores: p, sigma_t: sig, sigma_t1: sig, assignment: p };
        let gt = CorrespondenceSet {
            matches: vec![(5, 0)],
            unmatched_t: vec![],
            unmatched_t1: vec![],
        };
        assert!(match_loss(&mut tape, &[lm], &gt).is_err());
    }

    #[test]
    fn correspondence_set_rejects_duplicates() {
        assert!(CorrespondenceSet::new(vec![(0, 0), (0, 1)], 2, 2).is_err());
        assert!(CorrespondenceSet::new(vec![(0, 0), (1, 0)], 2, 2).is_err());
        let ok = CorrespondenceSet::new(vec![(1, 0)], 3, 2).unwrap();
        assert_eq!(ok.unmatched_t, vec![0, 2]);
        assert_eq!(ok.unmatched_t1, vec![1]);
    }
}
