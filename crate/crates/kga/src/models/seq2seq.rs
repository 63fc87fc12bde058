use crate::data::Instance;
use crate::error::{Error, Result};
use crate::gradkit::{forward, DenseArray, Graph, Inputs, NodeId, ParamSet};
use crate::models::{
    distributions_via_graph, init_matrix, DiffModel, Distribution, ModelSpec, OutputModel, Vocabulary, BOS_ID,
    EOS_ID, POSITION_CAP, UNK_ID,
};
use std::sync::Arc;

/// Architecture family for the encoder-decoder.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Seq2SeqFamily {
    /// Single-layer gated recurrent encoder/decoder with dot-product
    /// attention over encoder states.
    Recurrent,
    /// Single-block self-attention encoder-decoder with learned positions.
    SelfAttention,
}

/// Seq2seq model with a shared source/target vocabulary. `width` is the
/// hidden size for the recurrent family and the feed-forward size for the
/// self-attention family.
#[derive(Clone, Debug)]
pub struct Seq2SeqModel {
    family: Seq2SeqFamily,
    embed: usize,
    width: usize,
    vocab: Arc<Vocabulary>,
    params: ParamSet,
    seed: u64,
}

const GATE_NAMES: [&str; 3] = ["z", "r", "h"];

impl Seq2SeqModel {
    pub fn init(family: Seq2SeqFamily, embed: usize, width: usize, vocab: Arc<Vocabulary>, seed: u64) -> Result<Self> {
        if embed == 0 || width == 0 {
            return Err(Error::Model("seq2seq widths must be positive".into()));
        }
        let v = vocab.len();
        let mut params = ParamSet::new();
        params.insert("embed", init_matrix(v, embed, embed, seed, "embed"));
        match family {
            Seq2SeqFamily::Recurrent => {
                let h = width;
                for side in ["enc", "dec"] {
                    for gate in GATE_NAMES {
                        params.insert(&format!("{side}.w{gate}"), init_matrix(embed, h, embed, seed, &format!("{side}.w{gate}")));
                        params.insert(&format!("{side}.u{gate}"), init_matrix(h, h, h, seed, &format!("{side}.u{gate}")));
                        params.insert(&format!("{side}.b{gate}"), DenseArray::zeros(&[1, h]));
                    }
                }
                params.insert("out.w", init_matrix(2 * h, v, 2 * h, seed, "out.w"));
                params.insert("out.b", DenseArray::zeros(&[1, v]));
            }
            Seq2SeqFamily::SelfAttention => {
                let e = embed;
                let f = width;
                params.insert("pos", init_matrix(POSITION_CAP, e, e, seed, "pos"));
                for block in ["enc", "dec", "cross"] {
                    for proj in ["q", "k", "v"] {
                        params.insert(&format!("{block}.w{proj}"), init_matrix(e, e, e, seed, &format!("{block}.w{proj}")));
                    }
                }
                for side in ["enc", "dec"] {
                    params.insert(&format!("{side}.f1"), init_matrix(e, f, e, seed, &format!("{side}.f1")));
                    params.insert(&format!("{side}.fb1"), DenseArray::zeros(&[1, f]));
                    params.insert(&format!("{side}.f2"), init_matrix(f, e, f, seed, &format!("{side}.f2")));
                    params.insert(&format!("{side}.fb2"), DenseArray::zeros(&[1, e]));
                }
                params.insert("out.w", init_matrix(e, v, e, seed, "out.w"));
                params.insert("out.b", DenseArray::zeros(&[1, v]));
            }
        }
        Ok(Seq2SeqModel { family, embed, width, vocab, params, seed })
    }

    pub fn family(&self) -> Seq2SeqFamily {
        self.family
    }

    pub fn spec(&self) -> ModelSpec {
        match self.family {
            Seq2SeqFamily::Recurrent => ModelSpec::Recurrent { embed: self.embed, hidden: self.width },
            Seq2SeqFamily::SelfAttention => ModelSpec::SelfAttention { embed: self.embed, ff: self.width },
        }
    }

    pub fn vocab(&self) -> &Arc<Vocabulary> {
        &self.vocab
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    fn source_ids(&self, inst: &Instance) -> Result<Vec<usize>> {
        let toks = inst.input_tokens();
        let ids = if toks.is_empty() { vec![UNK_ID] } else { self.vocab.encode(&toks) };
        if self.family == Seq2SeqFamily::SelfAttention && ids.len() > POSITION_CAP {
            return Err(Error::Model(format!("source of {} tokens exceeds the position cap {POSITION_CAP}", ids.len())));
        }
        Ok(ids)
    }

    /// Teacher-forcing pair: decoder inputs `[bos, y1..ym]` and gold outputs
    /// `[y1..ym, eos]`.
    fn teacher_ids(&self, inst: &Instance) -> Result<(Vec<usize>, Vec<usize>)> {
        let target = inst.target_tokens();
        if target.is_empty() {
            return Err(Error::Model(format!("instance {:?} has an empty target", inst.id)));
        }
        if target.len() + 1 > POSITION_CAP {
            return Err(Error::Model(format!(
                "target of {} tokens exceeds the position cap {POSITION_CAP}",
                target.len()
            )));
        }
        let ids = self.vocab.encode(&target);
        let mut dec_in = Vec::with_capacity(ids.len() + 1);
        dec_in.push(BOS_ID);
        dec_in.extend_from_slice(&ids);
        let mut gold = ids;
        gold.push(EOS_ID);
        Ok((dec_in, gold))
    }

    // ----- recurrent family -----

    fn gru_step(&self, g: &mut Graph, side: &str, x: NodeId, h: NodeId) -> Result<NodeId> {
        let e = self.embed;
        let hw = self.width;
        let mut gates = Vec::with_capacity(3);
        for gate in GATE_NAMES {
            let w = g.param(&format!("{side}.w{gate}"), &[e, hw])?;
            let u = g.param(&format!("{side}.u{gate}"), &[hw, hw])?;
            let b = g.param(&format!("{side}.b{gate}"), &[1, hw])?;
            gates.push((w, u, b));
        }
        let (wz, uz, bz) = gates[0];
        let (wr, ur, br) = gates[1];
        let (wh, uh, bh) = gates[2];

        let xz = g.matmul(x, wz)?;
        let hz = g.matmul(h, uz)?;
        let z_pre = g.add(xz, hz)?;
        let z_pre = g.add(z_pre, bz)?;
        let z = g.sigmoid(z_pre);

        let xr = g.matmul(x, wr)?;
        let hr = g.matmul(h, ur)?;
        let r_pre = g.add(xr, hr)?;
        let r_pre = g.add(r_pre, br)?;
        let r = g.sigmoid(r_pre);

        let rh = g.mul(r, h)?;
        let xh = g.matmul(x, wh)?;
        let rhu = g.matmul(rh, uh)?;
        let c_pre = g.add(xh, rhu)?;
        let c_pre = g.add(c_pre, bh)?;
        let c = g.tanh(c_pre);

        // h' = h - z∘h + z∘c
        let zh = g.mul(z, h)?;
        let zc = g.mul(z, c)?;
        let kept = g.sub(h, zh)?;
        g.add(kept, zc)
    }

    /// Encoder over source ids; returns (all states `[L, h]`, last state `[1, h]`).
    fn recurrent_encoder(&self, g: &mut Graph, src: &[usize]) -> Result<(NodeId, NodeId)> {
        let embed = g.param("embed", &[self.vocab.len(), self.embed])?;
        let emb_src = g.row_lookup(embed, src.to_vec())?;
        let mut h = g.constant(DenseArray::zeros(&[1, self.width]));
        let mut all: Option<NodeId> = None;
        for t in 0..src.len() {
            let x = g.row_lookup(emb_src, vec![t])?;
            h = self.gru_step(g, "enc", x, h)?;
            all = Some(match all {
                None => h,
                Some(acc) => g.concat(acc, h, 0)?,
            });
        }
        Ok((all.expect("non-empty source"), h))
    }

    /// One decoder step: next hidden state and the output distribution row.
    fn recurrent_decoder_step(&self, g: &mut Graph, x: NodeId, s: NodeId, enc: NodeId) -> Result<(NodeId, NodeId)> {
        let v = self.vocab.len();
        let s_next = self.gru_step(g, "dec", x, s)?;
        let scores = g.matmul_tb(s_next, enc)?;
        let scaled = g.scale(scores, 1.0 / (self.width as f64).sqrt());
        let attn = g.softmax(scaled)?;
        let ctx = g.matmul(attn, enc)?;
        let comb = g.concat(s_next, ctx, 1)?;
        let ow = g.param("out.w", &[2 * self.width, v])?;
        let ob = g.param("out.b", &[1, v])?;
        let logits = g.matmul(comb, ow)?;
        let logits = g.add(logits, ob)?;
        let probs = g.softmax(logits)?;
        Ok((probs, s_next))
    }

    // ----- self-attention family -----

    fn attention(&self, g: &mut Graph, block: &str, q_src: NodeId, kv_src: NodeId, mask: Option<NodeId>) -> Result<NodeId> {
        let e = self.embed;
        let wq = g.param(&format!("{block}.wq"), &[e, e])?;
        let wk = g.param(&format!("{block}.wk"), &[e, e])?;
        let wv = g.param(&format!("{block}.wv"), &[e, e])?;
        let q = g.matmul(q_src, wq)?;
        let k = g.matmul(kv_src, wk)?;
        let v = g.matmul(kv_src, wv)?;
        let scores = g.matmul_tb(q, k)?;
        let mut scaled = g.scale(scores, 1.0 / (e as f64).sqrt());
        if let Some(m) = mask {
            scaled = g.add(scaled, m)?;
        }
        let attn = g.softmax(scaled)?;
        g.matmul(attn, v)
    }

    fn feed_forward(&self, g: &mut Graph, side: &str, x: NodeId) -> Result<NodeId> {
        let (e, f) = (self.embed, self.width);
        let f1 = g.param(&format!("{side}.f1"), &[e, f])?;
        let fb1 = g.param(&format!("{side}.fb1"), &[1, f])?;
        let f2 = g.param(&format!("{side}.f2"), &[f, e])?;
        let fb2 = g.param(&format!("{side}.fb2"), &[1, e])?;
        let t1 = g.matmul(x, f1)?;
        let t1 = g.add_row(t1, fb1)?;
        let a = g.tanh(t1);
        let t2 = g.matmul(a, f2)?;
        let t2 = g.add_row(t2, fb2)?;
        g.add(x, t2)
    }

    fn embed_with_positions(&self, g: &mut Graph, ids: &[usize]) -> Result<NodeId> {
        let embed = g.param("embed", &[self.vocab.len(), self.embed])?;
        let pos = g.param("pos", &[POSITION_CAP, self.embed])?;
        let tok = g.row_lookup(embed, ids.to_vec())?;
        let pos_rows = g.row_lookup(pos, (0..ids.len()).collect())?;
        g.add(tok, pos_rows)
    }

    fn attention_encoder(&self, g: &mut Graph, src: &[usize]) -> Result<NodeId> {
        let x = self.embed_with_positions(g, src)?;
        let z = self.attention(g, "enc", x, x, None)?;
        let x2 = g.add(x, z)?;
        self.feed_forward(g, "enc", x2)
    }

    fn causal_mask(&self, g: &mut Graph, n: usize) -> NodeId {
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in (i + 1)..n {
                data[i * n + j] = -1e9;
            }
        }
        g.constant(DenseArray::new(vec![n, n], data).expect("mask shape"))
    }

    /// Decoder probabilities `[len(dec_in), V]` given encoder output.
    fn attention_decoder(&self, g: &mut Graph, dec_in: &[usize], enc: NodeId) -> Result<NodeId> {
        let v = self.vocab.len();
        let y = self.embed_with_positions(g, dec_in)?;
        let mask = self.causal_mask(g, dec_in.len());
        let zs = self.attention(g, "dec", y, y, Some(mask))?;
        let y2 = g.add(y, zs)?;
        let c = self.attention(g, "cross", y2, enc, None)?;
        let y3 = g.add(y2, c)?;
        let y4 = self.feed_forward(g, "dec", y3)?;
        let ow = g.param("out.w", &[self.embed, v])?;
        let ob = g.param("out.b", &[1, v])?;
        let logits = g.matmul(y4, ow)?;
        let logits = g.add_row(logits, ob)?;
        g.softmax(logits)
    }

    // ----- incremental decoding (beam search support) -----

    /// Runs the encoder once for a source-token sequence.
    pub fn start_decode(&self, source_tokens: &[&str]) -> Result<DecodeContext> {
        let inst_ids = if source_tokens.is_empty() { vec![UNK_ID] } else { self.vocab.encode(source_tokens) };
        if self.family == Seq2SeqFamily::SelfAttention && inst_ids.len() > POSITION_CAP {
            return Err(Error::Model(format!(
                "source of {} tokens exceeds the position cap {POSITION_CAP}",
                inst_ids.len()
            )));
        }
        let mut g = Graph::new();
        let inputs = Inputs::new();
        match self.family {
            Seq2SeqFamily::Recurrent => {
                let (enc, last) = self.recurrent_encoder(&mut g, &inst_ids)?;
                let eval = forward(&g, &self.params, &inputs)?;
                Ok(DecodeContext {
                    encoder: eval.value(enc).clone(),
                    initial: DecodeState::Recurrent(eval.value(last).clone()),
                })
            }
            Seq2SeqFamily::SelfAttention => {
                let enc = self.attention_encoder(&mut g, &inst_ids)?;
                let eval = forward(&g, &self.params, &inputs)?;
                Ok(DecodeContext { encoder: eval.value(enc).clone(), initial: DecodeState::Prefix(Vec::new()) })
            }
        }
    }

    /// Feeds one token and returns the next-token distribution plus the
    /// successor state. Feeding the start token first reproduces exactly the
    /// teacher-forced position distributions.
    pub fn next_distribution(
        &self,
        ctx: &DecodeContext,
        state: &DecodeState,
        token: usize,
    ) -> Result<(Distribution, DecodeState)> {
        let mut g = Graph::new();
        let inputs = Inputs::new();
        match (self.family, state) {
            (Seq2SeqFamily::Recurrent, DecodeState::Recurrent(h)) => {
                let embed = g.param("embed", &[self.vocab.len(), self.embed])?;
                let x = g.row_lookup(embed, vec![token])?;
                let s = g.constant(h.clone());
                let enc = g.constant(ctx.encoder.clone());
                let (probs, s_next) = self.recurrent_decoder_step(&mut g, x, s, enc)?;
                let eval = forward(&g, &self.params, &inputs)?;
                Ok((
                    Distribution::new(eval.value(probs).data().to_vec())?,
                    DecodeState::Recurrent(eval.value(s_next).clone()),
                ))
            }
            (Seq2SeqFamily::SelfAttention, DecodeState::Prefix(prefix)) => {
                let mut next_prefix = prefix.clone();
                next_prefix.push(token);
                if next_prefix.len() > POSITION_CAP {
                    return Err(Error::Model("decode prefix exceeds the position cap".into()));
                }
                let enc = g.constant(ctx.encoder.clone());
                let probs = self.attention_decoder(&mut g, &next_prefix, enc)?;
                let eval = forward(&g, &self.params, &inputs)?;
                let value = eval.value(probs);
                let last = value.row(value.rows() - 1).to_vec();
                Ok((Distribution::new(last)?, DecodeState::Prefix(next_prefix)))
            }
            _ => Err(Error::Model("decode state does not match the model family".into())),
        }
    }
}

/// Encoder output reused across decode steps of one source.
pub struct DecodeContext {
    pub(crate) encoder: DenseArray,
    pub(crate) initial: DecodeState,
}

impl DecodeContext {
    pub fn initial_state(&self) -> DecodeState {
        self.initial.clone()
    }
}

/// Per-hypothesis decoder state.
#[derive(Clone, Debug)]
pub enum DecodeState {
    Recurrent(DenseArray),
    Prefix(Vec<usize>),
}

impl OutputModel for Seq2SeqModel {
    fn support(&self) -> usize {
        self.vocab.len()
    }

    fn support_fingerprint(&self) -> u64 {
        self.vocab.content_hash()
    }

    fn distributions(&self, inst: &Instance) -> Result<Vec<Distribution>> {
        distributions_via_graph(self, inst)
    }

    fn gold_ids(&self, inst: &Instance) -> Result<Vec<usize>> {
        let (_, gold) = self.teacher_ids(inst)?;
        Ok(gold)
    }
}

impl DiffModel for Seq2SeqModel {
    fn params(&self) -> &ParamSet {
        &self.params
    }

    fn params_mut(&mut self) -> &mut ParamSet {
        &mut self.params
    }

    fn build_prob_matrix(&self, g: &mut Graph, inst: &Instance) -> Result<NodeId> {
        let src = self.source_ids(inst)?;
        let (dec_in, _) = self.teacher_ids(inst)?;
        match self.family {
            Seq2SeqFamily::Recurrent => {
                let (enc, last) = self.recurrent_encoder(g, &src)?;
                let embed = g.param("embed", &[self.vocab.len(), self.embed])?;
                let emb_dec = g.row_lookup(embed, dec_in.clone())?;
                let mut s = last;
                let mut rows: Option<NodeId> = None;
                for t in 0..dec_in.len() {
                    let x = g.row_lookup(emb_dec, vec![t])?;
                    let (probs, s_next) = self.recurrent_decoder_step(g, x, s, enc)?;
                    s = s_next;
                    rows = Some(match rows {
                        None => probs,
                        Some(acc) => g.concat(acc, probs, 0)?,
                    });
                }
                Ok(rows.expect("non-empty target"))
            }
            Seq2SeqFamily::SelfAttention => {
                let enc = self.attention_encoder(g, &src)?;
                self.attention_decoder(g, &dec_in, enc)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Corpus, CorpusKind};

    fn tiny(family: Seq2SeqFamily) -> Seq2SeqModel {
        let corpus = Corpus::new(
            CorpusKind::Seq2Seq,
            vec![Instance::pair("a", "s1 s2 s3", "t1 t2"), Instance::pair("b", "s2 s4", "t3 t1 t2")],
            "t",
        )
        .unwrap();
        let vocab = Arc::new(Vocabulary::from_corpora(&[&corpus], 1));
        Seq2SeqModel::init(family, 6, 8, vocab, 11).unwrap()
    }

    #[test]
    fn distributions_have_one_row_per_gold_position() {
        for family in [Seq2SeqFamily::Recurrent, Seq2SeqFamily::SelfAttention] {
            let m = tiny(family);
            let inst = Instance::pair("x", "s1 s2", "t1 t2 t3");
            let dists = m.distributions(&inst).unwrap();
            assert_eq!(dists.len(), 4); // three tokens + end token
            for d in &dists {
                let total: f64 = d.probs().iter().sum();
                assert!((total - 1.0).abs() < 1e-9);
            }
            assert_eq!(m.gold_ids(&inst).unwrap().len(), 4);
        }
    }

    #[test]
    fn identical_models_give_identical_distribution_lists() {
        let a = tiny(Seq2SeqFamily::Recurrent);
        let b = tiny(Seq2SeqFamily::Recurrent);
        let inst = Instance::pair("x", "s1 s4", "t2 t1");
        assert_eq!(a.distributions(&inst).unwrap(), b.distributions(&inst).unwrap());
    }

    #[test]
    fn empty_target_is_rejected() {
        let m = tiny(Seq2SeqFamily::Recurrent);
        let inst = Instance::pair("x", "s1", "");
        assert!(m.distributions(&inst).is_err());
    }

    #[test]
    fn over_cap_target_is_rejected() {
        let m = tiny(Seq2SeqFamily::Recurrent);
        let long = vec!["t1"; POSITION_CAP + 1].join(" ");
        let inst = Instance::pair("x", "s1", long);
        assert!(m.gold_ids(&inst).is_err());
    }

    #[test]
    fn step_decoding_matches_teacher_forcing() {
        for family in [Seq2SeqFamily::Recurrent, Seq2SeqFamily::SelfAttention] {
            let m = tiny(family);
            let inst = Instance::pair("x", "s3 s2 s1", "t1 t3 t2");
            let forced = m.distributions(&inst).unwrap();

            let src = inst.input_tokens();
            let ctx = m.start_decode(&src).unwrap();
            let mut state = ctx.initial_state();
            let mut fed = vec![BOS_ID];
            fed.extend(m.vocab().encode(&inst.target_tokens()));
            let mut stepped = Vec::new();
            for &tok in &fed {
                let (dist, next) = m.next_distribution(&ctx, &state, tok).unwrap();
                stepped.push(dist);
                state = next;
            }
            assert_eq!(forced.len(), stepped.len());
            for (a, b) in forced.iter().zip(&stepped) {
                for (p, q) in a.probs().iter().zip(b.probs()) {
                    assert!((p - q).abs() < 1e-12, "family {family:?}: {p} vs {q}");
                }
            }
        }
    }
}
