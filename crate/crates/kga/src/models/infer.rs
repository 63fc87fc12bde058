use crate::error::{Error, Result};
use crate::models::{OutputModel, Seq2SeqModel, BOS_ID, EOS_ID, POSITION_CAP};

/// Floor applied to gold probabilities before taking logs.
const PROB_FLOOR: f64 = 1e-300;

/// Perplexity of the gold sequence under teacher forcing, with a record of
/// whether any gold probability had to be clamped at the floor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ppl {
    pub value: f64,
    pub clamped: bool,
}

/// `exp(mean −ln p_gold)` over the instance's positions (a classifier has
/// exactly one).
pub fn sequence_perplexity<M: OutputModel + ?Sized>(model: &M, inst: &crate::data::Instance) -> Result<Ppl> {
    let (log_prob, positions, clamped) = sequence_log_prob(model, inst)?;
    Ok(Ppl { value: (-log_prob / positions as f64).exp(), clamped })
}

/// Total log-probability of the gold sequence: `sum ln p_gold`, plus the
/// position count and the clamp flag.
pub fn sequence_log_prob<M: OutputModel + ?Sized>(
    model: &M,
    inst: &crate::data::Instance,
) -> Result<(f64, usize, bool)> {
    let dists = model.distributions(inst)?;
    let golds = model.gold_ids(inst)?;
    if dists.len() != golds.len() {
        return Err(Error::Model("distribution and gold lengths differ".into()));
    }
    let mut total = 0.0;
    let mut clamped = false;
    for (d, &gold) in dists.iter().zip(&golds) {
        let p = d.probs()[gold];
        if p < PROB_FLOOR {
            clamped = true;
        }
        total += p.max(PROB_FLOOR).ln();
    }
    Ok((total, golds.len(), clamped))
}

/// One step of autoregressive decoding. Cursors are persistent: feeding a
/// token returns a fresh cursor, so beam hypotheses can share ancestors.
pub trait DecodeCursor<'a> {
    fn feed(&self, token: usize) -> Result<(crate::models::Distribution, Box<dyn DecodeCursor<'a> + 'a>)>;
}

struct Seq2SeqCursor<'a> {
    model: &'a Seq2SeqModel,
    ctx: std::rc::Rc<crate::models::DecodeContext>,
    state: crate::models::DecodeState,
}

impl<'a> DecodeCursor<'a> for Seq2SeqCursor<'a> {
    fn feed(&self, token: usize) -> Result<(crate::models::Distribution, Box<dyn DecodeCursor<'a> + 'a>)> {
        let (dist, state) = self.model.next_distribution(&self.ctx, &self.state, token)?;
        Ok((dist, Box::new(Seq2SeqCursor { model: self.model, ctx: std::rc::Rc::clone(&self.ctx), state })))
    }
}

/// Root cursor for a single seq2seq model.
pub fn decode_root<'a>(model: &'a Seq2SeqModel, source_tokens: &[&str]) -> Result<Box<dyn DecodeCursor<'a> + 'a>> {
    let ctx = model.start_decode(source_tokens)?;
    let state = ctx.initial_state();
    Ok(Box::new(Seq2SeqCursor { model, ctx: std::rc::Rc::new(ctx), state }))
}

#[derive(Clone)]
struct Hypothesis<'a> {
    tokens: Vec<usize>,
    score: f64,
    cursor: std::rc::Rc<Box<dyn DecodeCursor<'a> + 'a>>,
    next: crate::models::Distribution,
}

#[derive(Clone)]
struct Finished {
    tokens: Vec<usize>,
    score: f64,
}

fn better(a_score: f64, a_tokens: &[usize], b_score: f64, b_tokens: &[usize]) -> bool {
    if a_score != b_score {
        return a_score > b_score;
    }
    a_tokens < b_tokens
}

/// Beam search over complete hypotheses: the result is the highest
/// accumulated-log-probability sequence ending in the end token (or cut at
/// the position cap). Ties resolve by token id, so decoding is
/// deterministic. Width 1 is greedy decoding.
pub fn beam_generate(model: &Seq2SeqModel, source_tokens: &[&str], beam_width: usize) -> Result<Vec<String>> {
    let root = decode_root(model, source_tokens)?;
    let ids = beam_over(root, beam_width)?;
    Ok(ids.iter().map(|&t| model.vocab().token(t).to_string()).collect())
}

/// Beam search over any decode cursor; returns token ids without the end
/// token.
pub fn beam_over<'a>(root: Box<dyn DecodeCursor<'a> + 'a>, beam_width: usize) -> Result<Vec<usize>> {
    if beam_width == 0 {
        return Err(Error::Model("beam width must be at least 1".into()));
    }
    let (root_dist, root_cursor) = root.feed(BOS_ID)?;
    let mut live =
        vec![Hypothesis { tokens: Vec::new(), score: 0.0, cursor: std::rc::Rc::new(root_cursor), next: root_dist }];
    let mut done: Vec<Finished> = Vec::new();

    for _ in 0..POSITION_CAP {
        if live.is_empty() {
            break;
        }
        // all continuations of all live hypotheses, scored
        let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
        for (i, hyp) in live.iter().enumerate() {
            for (tok, &p) in hyp.next.probs().iter().enumerate() {
                candidates.push((i, tok, hyp.score + p.max(PROB_FLOOR).ln()));
            }
        }
        candidates.sort_by(|a, b| {
            b.2.partial_cmp(&a.2).unwrap_or(std::cmp::Ordering::Equal).then_with(|| {
                let sa = (&live[a.0].tokens, a.1);
                let sb = (&live[b.0].tokens, b.1);
                sa.cmp(&sb)
            })
        });

        let mut next_live: Vec<Hypothesis> = Vec::with_capacity(beam_width);
        for &(parent, tok, score) in candidates.iter().take(beam_width) {
            let mut tokens = live[parent].tokens.clone();
            tokens.push(tok);
            if tok == EOS_ID {
                done.push(Finished { tokens, score });
            } else {
                let (dist, cursor) = live[parent].cursor.feed(tok)?;
                next_live.push(Hypothesis { tokens, score, cursor: std::rc::Rc::new(cursor), next: dist });
            }
        }
        live = next_live;

        // scores only decrease with length, so once the best finished
        // hypothesis beats every live one the search is settled
        let best_done = done.iter().map(|f| f.score).fold(f64::NEG_INFINITY, f64::max);
        if !done.is_empty() && live.iter().all(|h| h.score <= best_done) {
            break;
        }
    }

    for hyp in live {
        done.push(Finished { tokens: hyp.tokens, score: hyp.score });
    }
    let mut best: Option<Finished> = None;
    for f in done {
        let replace = match &best {
            None => true,
            Some(b) => better(f.score, &f.tokens, b.score, &b.tokens),
        };
        if replace {
            best = Some(f);
        }
    }
    let best = best.ok_or_else(|| Error::Model("beam search produced no hypothesis".into()))?;
    Ok(best.tokens.into_iter().filter(|&t| t != EOS_ID).collect())
}
