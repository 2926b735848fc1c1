//! Autoregressive event-sequence model: one causal self-attention block with
//! a feed-forward residual, over a small grammar-structured vocabulary.
//!
//! A sequence is `BOS, JAM_c, LOAD_c, (KIND, DT, LOC, MAG)*, EOS`.

use ndarray::{Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use super::scenario::Conditioning;
use crate::error::{Error, Result};
use crate::netsim::{Event, EventKind};
use crate::nn::{softmax, FlatAdam};

pub const DT_BUCKETS: [u32; 5] = [1, 2, 5, 10, 20];
/// Location buckets per axis; each covers `grid / LOC_SIDE` grid cells.
pub const LOC_SIDE: usize = 4;

pub const BOS: usize = 0;
pub const EOS: usize = 1;
const JAM0: usize = 2;
const LOAD0: usize = JAM0 + 3;
const KIND0: usize = LOAD0 + 3;
const DT0: usize = KIND0 + 5;
const LOC0: usize = DT0 + DT_BUCKETS.len();
const MAG0: usize = LOC0 + LOC_SIDE * LOC_SIDE;
pub const VOCAB: usize = MAG0 + 3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventSequence {
    pub conditioning: Conditioning,
    pub events: Vec<Event>,
}

pub fn dt_bucket(dt: u32) -> usize {
    let mut best = 0;
    for (i, &b) in DT_BUCKETS.iter().enumerate() {
        if dt.abs_diff(b) < dt.abs_diff(DT_BUCKETS[best]) {
            best = i;
        }
    }
    best
}

/// Grammar: may token `tok` appear at position `p`?
fn is_allowed(p: usize, tok: usize, context: usize) -> bool {
    match p {
        0 => tok == BOS,
        1 => (JAM0..JAM0 + 3).contains(&tok),
        2 => (LOAD0..LOAD0 + 3).contains(&tok),
        _ if p + 1 >= context => tok == EOS,
        _ => match (p - 3) % 4 {
            0 => tok == EOS || (KIND0..KIND0 + 5).contains(&tok),
            1 => (DT0..DT0 + DT_BUCKETS.len()).contains(&tok),
            2 => (LOC0..LOC0 + LOC_SIDE * LOC_SIDE).contains(&tok),
            _ => (MAG0..MAG0 + 3).contains(&tok),
        },
    }
}

/// Encode a sequence. `grid` is the side length of the scenario grid that
/// event locations refer to.
pub fn tokenize(seq: &EventSequence, grid: usize) -> Result<Vec<usize>> {
    let oov = |m: String| Error::OutOfVocabulary(m);
    let c = seq.conditioning;
    if c.jam > 2 || c.load > 2 {
        return Err(oov(format!("conditioning {c:?}")));
    }
    let mut toks = vec![BOS, JAM0 + c.jam as usize, LOAD0 + c.load as usize];
    let mut prev = 0u32;
    let per = (grid / LOC_SIDE).max(1);
    for e in &seq.events {
        if e.time < prev {
            return Err(oov(format!("unsorted event at t={}", e.time)));
        }
        if e.magnitude > 2 {
            return Err(oov(format!("magnitude {}", e.magnitude)));
        }
        let loc = match e.location {
            Some([x, y]) => {
                if x as usize >= grid || y as usize >= grid {
                    return Err(oov(format!("location {:?}", e.location)));
                }
                (y as usize / per) * LOC_SIDE + x as usize / per
            }
            None => 0,
        };
        toks.push(KIND0 + e.kind.index());
        toks.push(DT0 + dt_bucket(e.time - prev));
        toks.push(LOC0 + loc);
        toks.push(MAG0 + e.magnitude as usize);
        prev = e.time;
    }
    toks.push(EOS);
    Ok(toks)
}

/// Decode event tokens (after the conditioning prefix) to events with
/// absolute times; stops at EOS or at the first event past `horizon`.
pub fn detokenize(tokens: &[usize], grid: usize, horizon: u32) -> Vec<Event> {
    let per = (grid / LOC_SIDE).max(1);
    let body = tokens.get(3..).unwrap_or(&[]);
    let mut out = Vec::new();
    let mut t = 0u32;
    for chunk in body.chunks(4) {
        if chunk.len() < 4 || chunk[0] == EOS {
            break;
        }
        let kind = EventKind::ALL[chunk[0] - KIND0];
        t += DT_BUCKETS[chunk[1] - DT0];
        if t > horizon {
            break;
        }
        let loc = chunk[2] - LOC0;
        let mut e = Event::new(kind, t);
        if kind != EventKind::TrafficSurge {
            let cx = ((loc % LOC_SIDE) * per + per / 2).min(grid - 1);
            let cy = ((loc / LOC_SIDE) * per + per / 2).min(grid - 1);
            e.location = Some([cx as u8, cy as u8]);
        }
        e.magnitude = (chunk[3] - MAG0) as u8;
        out.push(e);
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EventModelConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub context: usize,
    pub lr: f64,
    pub epochs: usize,
    pub batch: usize,
    pub grid: usize,
}

impl Default for EventModelConfig {
    fn default() -> Self {
        EventModelConfig {
            d_model: 32,
            d_ff: 64,
            context: 32,
            lr: 3e-3,
            epochs: 40,
            batch: 16,
            grid: 16,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Layout {
    emb: usize,
    pos: usize,
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    wout: usize,
    bout: usize,
    total: usize,
}

fn layout(c: &EventModelConfig) -> Layout {
    let (d, f, l, v) = (c.d_model, c.d_ff, c.context, VOCAB);
    let mut o = 0;
    let mut take = |n: usize| {
        let at = o;
        o += n;
        at
    };
    let emb = take(v * d);
    let pos = take(l * d);
    let wq = take(d * d);
    let wk = take(d * d);
    let wv = take(d * d);
    let wo = take(d * d);
    let w1 = take(d * f);
    let b1 = take(f);
    let w2 = take(f * d);
    let b2 = take(d);
    let wout = take(d * v);
    let bout = take(v);
    Layout {
        emb,
        pos,
        wq,
        wk,
        wv,
        wo,
        w1,
        b1,
        w2,
        b2,
        wout,
        bout,
        total: o,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EventModel {
    pub cfg: EventModelConfig,
    pub params: Vec<f64>,
    /// Per-epoch perplexity on the training corpus.
    pub perplexity_curve: Vec<f64>,
}

struct Cache {
    h0: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    a: Array2<f64>,
    z: Array2<f64>,
    h1: Array2<f64>,
    f: Array2<f64>,
    h2: Array2<f64>,
    logits: Array2<f64>,
}

fn view<'a>(p: &'a [f64], at: usize, r: usize, c: usize) -> ArrayView2<'a, f64> {
    ArrayView2::from_shape((r, c), &p[at..at + r * c]).expect("parameter block")
}

fn view1(p: &[f64], at: usize, n: usize) -> ArrayView1<'_, f64> {
    ArrayView1::from(&p[at..at + n])
}

fn add_block(g: &mut [f64], at: usize, m: &Array2<f64>) {
    for (dst, src) in g[at..at + m.len()].iter_mut().zip(m.iter()) {
        *dst += src;
    }
}

impl EventModel {
    pub fn new(cfg: EventModelConfig, rng: &mut impl Rng) -> Self {
        let lay = layout(&cfg);
        let mut params = vec![0.0; lay.total];
        let d = cfg.d_model as f64;
        let init = |p: &mut [f64], at: usize, n: usize, fan_in: f64, rng: &mut dyn rand::RngCore| {
            let lim = (3.0 / fan_in).sqrt();
            let u = Uniform::new(-lim, lim).expect("valid range");
            for v in &mut p[at..at + n] {
                *v = u.sample(rng);
            }
        };
        let (dd, f, v) = (cfg.d_model, cfg.d_ff, VOCAB);
        init(&mut params, lay.emb, v * dd, 1.0, rng);
        init(&mut params, lay.pos, cfg.context * dd, 4.0, rng);
        for at in [lay.wq, lay.wk, lay.wv, lay.wo] {
            init(&mut params, at, dd * dd, d, rng);
        }
        init(&mut params, lay.w1, dd * f, d, rng);
        init(&mut params, lay.w2, f * dd, f as f64, rng);
        init(&mut params, lay.wout, dd * v, d, rng);
        EventModel {
            cfg,
            params,
            perplexity_curve: Vec::new(),
        }
    }

    fn forward(&self, tokens: &[usize]) -> Cache {
        let c = &self.cfg;
        let lay = layout(c);
        let p = &self.params;
        let (n, d) = (tokens.len(), c.d_model);
        let mut h0 = Array2::zeros((n, d));
        let emb = view(p, lay.emb, VOCAB, d);
        let pos = view(p, lay.pos, c.context, d);
        for (i, &t) in tokens.iter().enumerate() {
            let mut row = h0.row_mut(i);
            row += &emb.row(t);
            row += &pos.row(i);
        }
        let q = h0.dot(&view(p, lay.wq, d, d));
        let k = h0.dot(&view(p, lay.wk, d, d));
        let v = h0.dot(&view(p, lay.wv, d, d));
        let scale = 1.0 / (d as f64).sqrt();
        let scores = q.dot(&k.t()) * scale;
        let mut a = Array2::zeros((n, n));
        for i in 0..n {
            let row: Vec<f64> = (0..=i).map(|j| scores[[i, j]]).collect();
            for (j, w) in softmax(&row, 1.0).into_iter().enumerate() {
                a[[i, j]] = w;
            }
        }
        let z = a.dot(&v);
        let h1 = &h0 + &z.dot(&view(p, lay.wo, d, d));
        let mut f = h1.dot(&view(p, lay.w1, d, c.d_ff));
        f += &view1(p, lay.b1, c.d_ff);
        f.mapv_inplace(f64::tanh);
        let mut h2 = &h1 + &f.dot(&view(p, lay.w2, c.d_ff, d));
        h2 += &view1(p, lay.b2, d);
        let mut logits = h2.dot(&view(p, lay.wout, d, VOCAB));
        logits += &view1(p, lay.bout, VOCAB);
        Cache {
            h0,
            q,
            k,
            v,
            a,
            z,
            h1,
            f,
            h2,
            logits,
        }
    }

    /// Summed next-token cross-entropy of one sequence; accumulates
    /// `scale * dLoss/dParams` into `grad`. Returns (loss sum, predicted tokens).
    fn sequence_loss_grad(&self, seq: &[usize], scale: f64, grad: Option<&mut [f64]>) -> (f64, usize) {
        let n_in = seq.len().saturating_sub(1).min(self.cfg.context);
        if n_in == 0 {
            return (0.0, 0);
        }
        let input = &seq[..n_in];
        let cache = self.forward(input);
        let mut dlogits = Array2::zeros((n_in, VOCAB));
        let mut loss = 0.0;
        for i in 0..n_in {
            let probs = softmax(cache.logits.row(i).as_slice().expect("row"), 1.0);
            let target = seq[i + 1];
            loss -= probs[target].max(1e-300).ln();
            for (j, pj) in probs.into_iter().enumerate() {
                dlogits[[i, j]] = scale * (pj - (j == target) as u8 as f64);
            }
        }
        if let Some(g) = grad {
            self.backward(input, &cache, &dlogits, g);
        }
        (loss, n_in)
    }

    fn backward(&self, tokens: &[usize], c: &Cache, dlogits: &Array2<f64>, g: &mut [f64]) {
        let cfg = &self.cfg;
        let lay = layout(cfg);
        let p = &self.params;
        let (n, d, f) = (tokens.len(), cfg.d_model, cfg.d_ff);
        let wout = view(p, lay.wout, d, VOCAB);
        add_block(g, lay.wout, &c.h2.t().dot(dlogits));
        add_block(g, lay.bout, &dlogits.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let dh2 = dlogits.dot(&wout.t());

        let w2 = view(p, lay.w2, f, d);
        add_block(g, lay.w2, &c.f.t().dot(&dh2));
        add_block(g, lay.b2, &dh2.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let mut dpre = dh2.dot(&w2.t());
        ndarray::Zip::from(&mut dpre).and(&c.f).for_each(|dp, &fv| *dp *= 1.0 - fv * fv);
        let w1 = view(p, lay.w1, d, f);
        add_block(g, lay.w1, &c.h1.t().dot(&dpre));
        add_block(g, lay.b1, &dpre.sum_axis(Axis(0)).insert_axis(Axis(0)));
        let dh1 = &dh2 + &dpre.dot(&w1.t());

        let wo = view(p, lay.wo, d, d);
        add_block(g, lay.wo, &c.z.t().dot(&dh1));
        let dz = dh1.dot(&wo.t());
        let mut dh0 = dh1.clone();

        let da = dz.dot(&c.v.t());
        let dv = c.a.t().dot(&dz);
        let mut ds = Array2::zeros((n, n));
        for i in 0..n {
            let dot: f64 = (0..=i).map(|j| da[[i, j]] * c.a[[i, j]]).sum();
            for j in 0..=i {
                ds[[i, j]] = c.a[[i, j]] * (da[[i, j]] - dot);
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        ds *= scale;
        let dq = ds.dot(&c.k);
        let dk = ds.t().dot(&c.q);
        for (at, dm) in [(lay.wq, &dq), (lay.wk, &dk), (lay.wv, &dv)] {
            add_block(g, at, &c.h0.t().dot(dm));
            dh0 += &dm.dot(&view(p, at, d, d).t());
        }
        for (i, &t) in tokens.iter().enumerate() {
            for k in 0..d {
                g[lay.emb + t * d + k] += dh0[[i, k]];
                g[lay.pos + i * d + k] += dh0[[i, k]];
            }
        }
    }

    /// Mean per-token cross-entropy over `seqs` and its gradient.
    pub fn loss_and_grad(&self, seqs: &[Vec<usize>]) -> (f64, Vec<f64>) {
        let total: usize = seqs
            .iter()
            .map(|s| s.len().saturating_sub(1).min(self.cfg.context))
            .sum();
        let mut grad = vec![0.0; self.params.len()];
        if total == 0 {
            return (0.0, grad);
        }
        let scale = 1.0 / total as f64;
        let mut loss = 0.0;
        for s in seqs {
            loss += self.sequence_loss_grad(s, scale, Some(&mut grad)).0;
        }
        (loss * scale, grad)
    }

    pub fn perplexity(&self, seqs: &[Vec<usize>]) -> f64 {
        let (mut loss, mut count) = (0.0, 0);
        for s in seqs {
            let (l, c) = self.sequence_loss_grad(s, 1.0, None);
            loss += l;
            count += c;
        }
        (loss / count.max(1) as f64).exp()
    }

    /// Next-token distribution after `prefix`, restricted to the grammar.
    pub fn next_distribution(&self, prefix: &[usize], temperature: f64) -> Vec<f64> {
        let start = prefix.len().saturating_sub(self.cfg.context);
        let window = &prefix[start..];
        let cache = self.forward(window);
        let last = cache.logits.row(window.len() - 1);
        let p = prefix.len();
        let masked: Vec<f64> = (0..VOCAB)
            .map(|t| {
                if is_allowed(p, t, self.cfg.context) {
                    last[t]
                } else {
                    f64::NEG_INFINITY
                }
            })
            .collect();
        softmax(&masked, temperature.max(1e-6))
    }
}

/// Next-token cross-entropy training with Adam.
pub fn train_event_model(corpus: &[EventSequence], cfg: &EventModelConfig, rng: &mut impl Rng) -> Result<EventModel> {
    if corpus.is_empty() {
        return Err(Error::Config("empty event corpus".into()));
    }
    let seqs: Vec<Vec<usize>> = corpus
        .iter()
        .map(|s| {
            let t = tokenize(s, cfg.grid)?;
            if t.len() > cfg.context {
                return Err(Error::OutOfVocabulary(format!(
                    "sequence of {} tokens exceeds the context of {}",
                    t.len(),
                    cfg.context
                )));
            }
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let mut model = EventModel::new(cfg.clone(), rng);
    let mut opt = FlatAdam::new(model.params.len(), cfg.lr);
    model.perplexity_curve.push(model.perplexity(&seqs));
    let mut order: Vec<usize> = (0..seqs.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(rng);
        for chunk in order.chunks(cfg.batch.max(1)) {
            let batch: Vec<Vec<usize>> = chunk.iter().map(|&i| seqs[i].clone()).collect();
            let (loss, grad) = model.loss_and_grad(&batch);
            if !loss.is_finite() {
                return Err(Error::NumericalDivergence);
            }
            opt.step(&mut model.params, &grad);
        }
        model.perplexity_curve.push(model.perplexity(&seqs));
    }
    Ok(model)
}

/// Sample an event sequence. `prefix` events are forced before sampling
/// continues. Sampling stops at EOS, the context limit, or the horizon.
pub fn sample_events(
    model: &EventModel,
    conditioning: Conditioning,
    prefix: &[Event],
    horizon: u32,
    temperature: f64,
    rng: &mut impl Rng,
) -> Result<Vec<Event>> {
    if horizon == 0 {
        return Ok(Vec::new());
    }
    let grid = model.cfg.grid;
    let mut toks = tokenize(
        &EventSequence {
            conditioning,
            events: prefix.to_vec(),
        },
        grid,
    )?;
    toks.pop(); // EOS
    while toks.len() < model.cfg.context {
        let probs = model.next_distribution(&toks, temperature);
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut pick = probs.len() - 1;
        for (i, p) in probs.iter().enumerate() {
            acc += p;
            if u < acc {
                pick = i;
                break;
            }
        }
        while probs[pick] == 0.0 {
            pick -= 1;
        }
        if pick == EOS {
            break;
        }
        toks.push(pick);
    }
    Ok(detokenize(&toks, grid, horizon))
}

/// Greedy decoding (always the most likely allowed token).
pub fn greedy_tokens(model: &EventModel, conditioning: Conditioning) -> Vec<usize> {
    let mut toks = vec![BOS, JAM0 + conditioning.jam as usize, LOAD0 + conditioning.load as usize];
    while toks.len() < model.cfg.context {
        let probs = model.next_distribution(&toks, 1.0);
        let pick = crate::nn::argmax(&probs);
        toks.push(pick);
        if pick == EOS {
            break;
        }
    }
    toks
}
