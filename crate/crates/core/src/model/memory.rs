//! Key-value preference memory over the user's history.

use std::collections::HashMap;

use crate::config::MemoryVariant;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::encoders::UtteranceRep;
use crate::nn;
use crate::real::Real;
use crate::tensor::Tensor;

pub const POSITION: &str = "mem.pos";
pub const KEY_RNN: &str = "mem.key_rnn";
pub const VALUE_RNN: &str = "mem.val_rnn";
pub const SHARED_RNN: &str = "mem.rnn";
pub const ADDRESS: &str = "mem.addr";

/// Keys and values `[slots, d]` with zero rows at empty slots.
#[derive(Debug, Clone)]
pub struct PreferenceMemory {
    pub keys: Var,
    pub values: Var,
    pub slot_mask: Vec<bool>,
}

impl PreferenceMemory {
    pub fn n_real(&self) -> usize {
        self.slot_mask.iter().filter(|&&m| m).count()
    }
}

/// Parameter names of the position-aware recurrent layer; `None` bypasses it.
#[derive(Debug, Clone, Copy)]
pub struct PositionLayer<'n> {
    pub table: &'n str,
    pub key_rnn: &'n str,
    pub value_rnn: &'n str,
}

/// Mean over the real words of each utterance, then elementwise max across
/// utterances. Used both for the current-context query and history keys.
pub fn build_query<T: Real>(g: &mut Graph<'_, T>, reps: &[UtteranceRep]) -> Result<Var> {
    if reps.is_empty() {
        return Err(Error::data(None, "query needs at least one real utterance"));
    }
    let means = reps.iter().map(|r| g.mean_rows(r.hidden, Some(&r.mask))).collect::<Result<Vec<_>>>()?;
    if means.len() == 1 {
        return Ok(means[0]);
    }
    let stacked = g.stack_rows(&means)?;
    g.max_rows(stacked, None)
}

/// Builds the memory from pooled history contexts and pooled history
/// stickers (oldest first). `positions` are the 1-based ordinals of the
/// pairs and must run 1, 2, 3, ... Returns `None` for an empty history.
pub fn encode_history<T: Real>(
    g: &mut Graph<'_, T>,
    contexts: &[Var],
    stickers: &[Var],
    positions: &[usize],
    slots: usize,
    layer: Option<PositionLayer<'_>>,
) -> Result<Option<PreferenceMemory>> {
    let n = contexts.len();
    if stickers.len() != n || positions.len() != n {
        return Err(Error::shape("encode_history", "history inputs differ in length"));
    }
    if n > slots {
        return Err(Error::shape("encode_history", format!("{n} pairs for {slots} slots")));
    }
    if let Some(k) = positions.iter().enumerate().position(|(k, &p)| p != k + 1) {
        return Err(Error::data(None, format!("history position {} at slot {k} is out of order", positions[k])));
    }
    if n == 0 {
        return Ok(None);
    }
    let d = g.shape(contexts[0])[0];
    let (keys, values) = match layer {
        None => (contexts.to_vec(), stickers.to_vec()),
        Some(l) => {
            let table = g.param(l.table)?;
            let ids: Vec<usize> = positions.iter().map(|p| p - 1).collect();
            let t = g.embedding(table, &ids)?;
            let kin = g.stack_rows(contexts)?;
            let kin = g.concat(&[t, kin])?;
            let vin = g.stack_rows(stickers)?;
            let vin = g.concat(&[t, vin])?;
            let mask = vec![true; n];
            let h0 = g.constant(Tensor::zeros(&[d]));
            let (kseq, _) = nn::gru_chain(g, kin, &mask, h0, l.key_rnn)?;
            let (vseq, _) = nn::gru_chain(g, vin, &mask, h0, l.value_rnn)?;
            let rows = |g: &mut Graph<'_, T>, x: Var| (0..n).map(|k| g.select_row(x, k)).collect::<Result<Vec<_>>>();
            (rows(g, kseq)?, rows(g, vseq)?)
        }
    };
    let zero = g.constant(Tensor::zeros(&[d]));
    let pad = |mut v: Vec<Var>| {
        v.resize(slots, zero);
        v
    };
    let keys = g.stack_rows(&pad(keys))?;
    let values = g.stack_rows(&pad(values))?;
    let slot_mask = (0..slots).map(|k| k < n).collect();
    Ok(Some(PreferenceMemory { keys, values, slot_mask }))
}

#[derive(Debug, Clone, Copy)]
pub struct MemoryRead {
    /// `[d]`; zero when there is no history.
    pub r_pref: Var,
    /// Read weights `[slots]` for the addressed variants.
    pub delta: Option<Var>,
    pub no_history: bool,
}

/// Reads the memory with the current-context query.
pub fn memory_read<T: Real>(
    g: &mut Graph<'_, T>,
    query: Var,
    mem: Option<&PreferenceMemory>,
    variant: MemoryVariant,
) -> Result<MemoryRead> {
    let d = g.shape(query)[0];
    let Some(mem) = mem else {
        let r_pref = g.constant(Tensor::zeros(&[d]));
        return Ok(MemoryRead { r_pref, delta: None, no_history: true });
    };
    let addressed = |g: &mut Graph<'_, T>, target: Var| -> Result<(Var, Var)> {
        let a = nn::projection(g, query, ADDRESS)?;
        let tt = g.transpose(target)?;
        let scores = g.matmul(a, tt)?;
        let delta = g.masked_softmax_rows(scores, &mem.slot_mask)?;
        let r = g.matmul(delta, mem.values)?;
        Ok((r, delta))
    };
    let (r_pref, delta) = match variant {
        MemoryVariant::Full => {
            let (r, d) = addressed(g, mem.keys)?;
            (r, Some(d))
        }
        MemoryVariant::WeightedMem => {
            let (r, d) = addressed(g, mem.values)?;
            (r, Some(d))
        }
        MemoryVariant::AverageMem => (g.mean_rows(mem.values, Some(&mem.slot_mask))?, None),
        MemoryVariant::MostSelected => {
            return Err(Error::config("the most-selected variant ranks without the network"));
        }
    };
    Ok(MemoryRead { r_pref, delta, no_history: false })
}

/// The sticker chosen most often in `history` (oldest first); ties go to the
/// most recently used one.
pub fn most_selected<'s>(history: &[&'s str]) -> Option<&'s str> {
    let mut stats: HashMap<&str, (usize, usize)> = HashMap::new();
    for (i, &id) in history.iter().enumerate() {
        let e = stats.entry(id).or_insert((0, 0));
        e.0 += 1;
        e.1 = i;
    }
    stats.into_iter().max_by_key(|&(_, (count, last))| (count, last)).map(|(id, _)| id)
}

/// Scores candidates by history frequency with a recency tie-break, so the
/// top candidate is the most selected one available. `None` (abstain) when
/// no candidate appears in the history.
pub fn frequency_scores(history: &[&str], candidates: &[&str]) -> Option<Vec<f64>> {
    let n = history.len() as f64;
    let scores: Vec<f64> = candidates
        .iter()
        .map(|c| {
            let count = history.iter().filter(|&&h| h == *c).count() as f64;
            let last = history.iter().rposition(|&h| h == *c).map_or(0.0, |i| (i + 1) as f64);
            count + last / (n + 1.0)
        })
        .collect();
    scores.iter().any(|&s| s > 0.0).then_some(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::Mode;
    use crate::nn::ParamBuilder;
    use crate::params::{Init, ParamSet};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const D: usize = 6;

    fn params(seed: u64) -> ParamSet<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ParamBuilder::<f64, _>::new(&mut rng, Init::TruncNormal(0.4));
        b.tensor(POSITION, &[4, 3]).unwrap();
        b.gru(KEY_RNN, D + 3, D).unwrap();
        b.gru(VALUE_RNN, D + 3, D).unwrap();
        b.projection(ADDRESS, D, D).unwrap();
        b.set
    }

    fn rand_vecs(rng: &mut ChaCha8Rng, n: usize) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..D).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
    }

    fn layer() -> Option<PositionLayer<'static>> {
        Some(PositionLayer { table: POSITION, key_rnn: KEY_RNN, value_rnn: VALUE_RNN })
    }

    /// Scalar GRU step written out independently of the graph.
    fn gru_step(p: &ParamSet<f64>, name: &str, x: &[f64], h: &[f64]) -> Vec<f64> {
        let w_ih = p.get(&format!("{name}.w_ih")).unwrap().data();
        let w_hh = p.get(&format!("{name}.w_hh")).unwrap().data();
        let b_ih = p.get(&format!("{name}.b_ih")).unwrap().data();
        let b_hh = p.get(&format!("{name}.b_hh")).unwrap().data();
        let dh = h.len();
        let lin = |w: &[f64], b: &[f64], v: &[f64], col: usize| -> f64 {
            b[col] + v.iter().enumerate().map(|(i, &vi)| vi * w[i * 3 * dh + col]).sum::<f64>()
        };
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        (0..dh)
            .map(|j| {
                let r = sig(lin(w_ih, b_ih, x, j) + lin(w_hh, b_hh, h, j));
                let z = sig(lin(w_ih, b_ih, x, dh + j) + lin(w_hh, b_hh, h, dh + j));
                let n = (lin(w_ih, b_ih, x, 2 * dh + j) + r * lin(w_hh, b_hh, h, 2 * dh + j)).tanh();
                (1.0 - z) * n + z * h[j]
            })
            .collect()
    }

    fn build(
        g: &mut Graph<'_, f64>,
        ctx: &[Vec<f64>],
        st: &[Vec<f64>],
        layer: Option<PositionLayer<'_>>,
    ) -> Option<PreferenceMemory> {
        let c: Vec<Var> = ctx.iter().map(|v| g.constant_vec(v.clone())).collect();
        let s: Vec<Var> = st.iter().map(|v| g.constant_vec(v.clone())).collect();
        let pos: Vec<usize> = (1..=ctx.len()).collect();
        encode_history(g, &c, &s, &pos, 4, layer).unwrap()
    }

    #[test]
    fn chains_match_scalar_gru() {
        let p = params(1);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (ctx, st) = (rand_vecs(&mut rng, 3), rand_vecs(&mut rng, 3));
        let mut g = Graph::new(&p, Mode::Eval, 0);
        let mem = build(&mut g, &ctx, &st, layer()).unwrap();
        assert_eq!(g.shape(mem.keys), &[4, D]);
        assert_eq!(mem.slot_mask, vec![true, true, true, false]);
        let table = p.get(POSITION).unwrap().data();
        let (mut hk, mut hv) = (vec![0.0; D], vec![0.0; D]);
        for k in 0..3 {
            let t = &table[k * 3..(k + 1) * 3];
            let xk: Vec<f64> = t.iter().chain(&ctx[k]).copied().collect();
            let xv: Vec<f64> = t.iter().chain(&st[k]).copied().collect();
            hk = gru_step(&p, KEY_RNN, &xk, &hk);
            hv = gru_step(&p, VALUE_RNN, &xv, &hv);
            for i in 0..D {
                assert!((g.value(mem.keys)[k * D + i] - hk[i]).abs() < 1e-6);
                assert!((g.value(mem.values)[k * D + i] - hv[i]).abs() < 1e-6);
            }
        }
        assert!(g.value(mem.keys)[3 * D..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bypassed_layer_passes_inputs_through() {
        let p = params(2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (ctx, st) = (rand_vecs(&mut rng, 2), rand_vecs(&mut rng, 2));
        let mut g = Graph::new(&p, Mode::Eval, 0);
        let mem = build(&mut g, &ctx, &st, None).unwrap();
        assert_eq!(&g.value(mem.keys)[..D], &ctx[0][..]);
        assert_eq!(&g.value(mem.values)[D..2 * D], &st[1][..]);
    }

    #[test]
    fn empty_history_reads_zero() {
        let p = params(3);
        let mut g = Graph::new(&p, Mode::Eval, 0);
        assert!(build(&mut g, &[], &[], layer()).is_none());
        let q = g.constant_vec(vec![1.0; D]);
        let read = memory_read(&mut g, q, None, MemoryVariant::Full).unwrap();
        assert!(read.no_history);
        assert!(g.value(read.r_pref).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn out_of_order_positions_rejected() {
        let p = params(3);
        let mut g = Graph::new(&p, Mode::Eval, 0);
        let v = g.constant_vec(vec![0.0; D]);
        let err = encode_history(&mut g, &[v, v], &[v, v], &[2, 1], 4, None).unwrap_err();
        assert!(matches!(err, Error::Data { .. }));
    }

    #[test]
    fn single_slot_reads_its_value_and_zero_address_is_uniform() {
        let mut p = params(4);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (ctx, st) = (rand_vecs(&mut rng, 4), rand_vecs(&mut rng, 4));
        {
            let mut g = Graph::new(&p, Mode::Eval, 0);
            let mem = build(&mut g, &ctx[..1], &st[..1], None).unwrap();
            let q = g.constant_vec(ctx[2].clone());
            let read = memory_read(&mut g, q, Some(&mem), MemoryVariant::Full).unwrap();
            assert_eq!(g.value(read.delta.unwrap()), &[1.0, 0.0, 0.0, 0.0]);
            assert_eq!(g.value(read.r_pref), &st[0][..]);
        }
        p.get_mut(&format!("{ADDRESS}.w")).unwrap().data_mut().iter_mut().for_each(|v| *v = 0.0);
        let mut g = Graph::new(&p, Mode::Eval, 0);
        let mem = build(&mut g, &ctx, &st, None).unwrap();
        let q = g.constant_vec(ctx[0].clone());
        let read = memory_read(&mut g, q, Some(&mem), MemoryVariant::Full).unwrap();
        assert_eq!(g.value(read.delta.unwrap()), &[0.25; 4]);
    }

    #[test]
    fn average_of_identical_values_is_that_value() {
        let p = params(5);
        let v = vec![0.5, -1.0, 2.0, 0.0, 0.25, 3.0];
        let mut g = Graph::new(&p, Mode::Eval, 0);
        let mem = build(&mut g, &[v.clone(), v.clone(), v.clone()], &[v.clone(), v.clone(), v.clone()], None).unwrap();
        let q = g.constant_vec(vec![1.0; D]);
        let read = memory_read(&mut g, q, Some(&mem), MemoryVariant::AverageMem).unwrap();
        for (a, b) in g.value(read.r_pref).iter().zip(&v) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn weighted_variant_matches_hand_rolled_attention() {
        let p = params(6);
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (ctx, st) = (rand_vecs(&mut rng, 3), rand_vecs(&mut rng, 3));
        let q = rand_vecs(&mut rng, 1).remove(0);
        let mut g = Graph::new(&p, Mode::Eval, 0);
        let mem = build(&mut g, &ctx, &st, None).unwrap();
        let qv = g.constant_vec(q.clone());
        let read = memory_read(&mut g, qv, Some(&mem), MemoryVariant::WeightedMem).unwrap();
        let w = p.get(&format!("{ADDRESS}.w")).unwrap().data();
        let a: Vec<f64> = (0..D).map(|j| (0..D).map(|i| q[i] * w[i * D + j]).sum()).collect();
        let s: Vec<f64> = st.iter().map(|o| a.iter().zip(o).map(|(x, y)| x * y).sum()).collect();
        let mx = s.iter().copied().fold(f64::MIN, f64::max);
        let e: Vec<f64> = s.iter().map(|v| (v - mx).exp()).collect();
        let z: f64 = e.iter().sum();
        let want: Vec<f64> = (0..D).map(|i| (0..3).map(|k| e[k] / z * st[k][i]).sum()).collect();
        for (x, y) in g.value(read.r_pref).iter().zip(&want) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn modal_sticker_with_recency_tie_break() {
        assert_eq!(most_selected(&["A", "B", "A"]), Some("A"));
        assert_eq!(most_selected(&["A", "B", "B", "A"]), Some("A"));
        assert_eq!(most_selected(&["B", "A"]), Some("A"));
        assert_eq!(most_selected(&[]), None);
        let s = frequency_scores(&["A", "B", "A"], &["C", "B", "A"]).unwrap();
        assert!(s[2] > s[1] && s[1] > s[0]);
        assert!(frequency_scores(&["X"], &["C", "B"]).is_none());
        assert!(frequency_scores(&[], &["C"]).is_none());
    }
}
