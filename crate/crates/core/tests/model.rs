mod common;

use common::toy;
use proptest::prelude::*;
use skh_core::embed::{embed_numerical, magnitude};
use skh_core::encoder::{encode, fuse, local_mask, EncoderTrace};
use skh_core::model::Model;
use skh_core::numerics::{grad_check, GradCheckOptions, Graph, Tensor, BLOCK};
use skh_core::planner::{
    argmax, decode_beam, decode_greedy, entity_step, knowledge_step, pointer_scores, teacher_forced, triple_mask,
    DecodeOptions, DecodeState,
};
use skh_core::schema::{AttrValue, Example, StructuredInput};

fn set(model: &mut Model, name: &str, f: impl Fn(usize) -> f64) {
    let t = model.params.get_mut(name).unwrap();
    for (i, x) in t.data_mut().iter_mut().enumerate() {
        *x = f(i);
    }
}

fn embedding_rows(model: &Model, input: &StructuredInput) -> Vec<f64> {
    let mut g = Graph::new();
    let f = model.features(input);
    let x = embed_numerical(&mut g, &model.params, &f, &model.config.embed).unwrap();
    g.value(x).to_vec()
}

#[test]
fn zero_weights_embed_to_relu_bias() {
    let data = toy::corpus(1, 3, 3, 4);
    let mut m = toy::model(toy::config(8), &data, 0);
    set(&mut m, "embed.w", |_| 0.0);
    set(&mut m, "embed.b", |i| i as f64 - 3.5);
    let rows = embedding_rows(&m, &data[0].input);
    for row in rows.chunks(8) {
        for (i, &x) in row.iter().enumerate() {
            assert_eq!(x, (i as f64 - 3.5).max(0.0));
        }
    }
    set(&mut m, "embed.b", |_| -1.0);
    assert!(embedding_rows(&m, &data[0].input).iter().all(|&x| x == 0.0));
}

#[test]
fn embedding_matches_hand_computation() {
    let data = toy::corpus(2, 4, 2, 5);
    let m = toy::model(toy::config(4), &data, 3);
    let input = &data[1].input;
    let f = m.features(input);
    let got = embedding_rows(&m, input);
    let p = &m.params;
    let e = m.config.d_emb;
    let mean = |table: &str, bag: &[usize]| -> Vec<f64> {
        let t = p.get(table).unwrap().data();
        (0..e)
            .map(|c| bag.iter().map(|&id| t[id * e + c]).sum::<f64>() / bag.len() as f64)
            .collect()
    };
    let w = p.get("embed.w").unwrap().data();
    let b = p.get("embed.b").unwrap().data();
    let mag = p.get("embed.value_mag").unwrap().data();
    for r in 0..input.num_total() {
        let mut x = mean("embed.name", &f.name[r]);
        let mut v = mean("embed.value", &f.value[r]);
        for (c, vc) in v.iter_mut().enumerate() {
            *vc += f.magnitude[r] * mag[c];
        }
        x.extend(mean("embed.attr", &f.attr[r]));
        x.extend(v);
        x.extend(mean("embed.type", &f.kind[r]));
        for o in 0..4 {
            let h = b[o] + (0..4 * e).map(|i| x[i] * w[i * 4 + o]).sum::<f64>();
            assert!((got[r * 4 + o] - h.max(0.0)).abs() < 1e-12, "row {r} col {o}");
        }
        let t = input.triple(r);
        let expect = t.numeric_value().map_or(0.0, magnitude);
        assert_eq!(f.magnitude[r], if t.is_hol { 0.0 } else { expect });
    }
}

fn shuffled(order: &[usize], input: &StructuredInput) -> (StructuredInput, Vec<usize>) {
    let permuted = input.permute_entities(order).unwrap();
    // new flat row -> old flat row
    let mut map = Vec::new();
    for &old in order {
        let start = input.blocks()[old].start;
        let len = input.blocks()[old].len();
        map.extend(start..start + len);
    }
    (permuted, map)
}

fn encoded(m: &Model, input: &StructuredInput) -> (Vec<f64>, Vec<f64>) {
    let mut g = Graph::new();
    let enc = m.encode(&mut g, input, None).unwrap();
    (g.value(enc.h).to_vec(), g.value(enc.h_e).to_vec())
}

#[test]
fn encoder_is_permutation_equivariant() {
    let data = toy::corpus(3, 3, 4, 3);
    let m = toy::model(toy::config(8), &data, 5);
    let d = 8;
    for ex in &data {
        let (h, he) = encoded(&m, &ex.input);
        let order = [2, 0, 3, 1];
        let (perm, map) = shuffled(&order, &ex.input);
        let (h2, he2) = encoded(&m, &perm);
        for (new, &old) in map.iter().enumerate() {
            for c in 0..d {
                assert!((h2[new * d + c] - h[old * d + c]).abs() < 1e-9);
            }
        }
        for (new, &old) in order.iter().enumerate() {
            for c in 0..d {
                assert!((he2[new * d + c] - he[old * d + c]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn local_attention_stays_in_block() {
    let data = toy::corpus(4, 5, 3, 4);
    let m = toy::model(toy::config(8), &data, 6);
    for ex in &data {
        let mut g = Graph::new();
        let mut trace = EncoderTrace::default();
        m.encode(&mut g, &ex.input, Some(&mut trace)).unwrap();
        let mask = local_mask(&ex.input);
        assert_eq!(trace.local_attention.len(), 2 * 2);
        for rec in &trace.local_attention {
            for (i, &pr) in rec.probs.iter().enumerate() {
                if mask[i] == BLOCK {
                    assert!(pr < 1e-12);
                }
            }
        }
        let crossed = trace
            .global_attention
            .iter()
            .flat_map(|r| r.probs.iter().zip(&mask))
            .any(|(&pr, &mk)| mk == BLOCK && pr > 1e-6);
        assert!(crossed);
    }
}

#[test]
fn tied_stacks_fuse_to_local() {
    let input = StructuredInput::new(
        vec![("Solo".into(), (0..4).map(|a| AttrValue::number(format!("a{a}"), a * 3)).collect())],
        None,
    )
    .unwrap();
    let ex = Example { id: "x".into(), input, gold_plan: None, reference: None };
    let mut m = toy::model(toy::config(8), std::slice::from_ref(&ex), 9);
    let names: Vec<String> = m.params.names().filter(|n| n.contains(".local.")).map(String::from).collect();
    for n in names {
        let src = m.params.get(&n).unwrap().data().to_vec();
        set(&mut m, &n.replace(".local.", ".global."), |i| src[i]);
    }
    let mut g = Graph::new();
    let mut trace = EncoderTrace::default();
    m.encode(&mut g, &ex.input, Some(&mut trace)).unwrap();
    for (l, gl, h) in &trace.fusion {
        assert_eq!(l, gl);
        assert_eq!(h, l);
    }
}

proptest! {
    #[test]
    fn fusion_is_exact_when_tied_and_bounded(vals in prop::collection::vec(-50.0f64..50.0, 2..24)) {
        let n = vals.len() / 2;
        let (lv, gv) = (vals[..n].to_vec(), vals[n..2 * n].to_vec());
        let mut g = Graph::new();
        let l = g.constant(1, n, lv.clone()).unwrap();
        let gl = g.constant(1, n, gv.clone()).unwrap();
        let same = fuse(&mut g, l, l).unwrap();
        prop_assert_eq!(g.value(same), &lv[..]);
        let h = fuse(&mut g, l, gl).unwrap();
        for ((&x, &a), &b) in g.value(h).iter().zip(&lv).zip(&gv) {
            let tol = 4.0 * f64::EPSILON * a.abs().max(b.abs());
            prop_assert!(x >= a.min(b) - tol && x <= a.max(b) + tol);
        }
    }
}

#[test]
fn encoder_gradients_match_finite_differences() {
    let data = toy::corpus(5, 1, 2, 3);
    let m = toy::model(toy::config(8), &data, 12);
    let input = data[0].input.clone();
    let spec = m.config.encoder_spec();
    let weights: Vec<f64> = (0..8 * 8).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
    let x = Tensor::new(vec![8, 8], (0..64).map(|i| ((i * 5) % 13) as f64 / 13.0).collect()).unwrap();
    let report = grad_check(
        |g, p| {
            let xv = g.constant_tensor(&x);
            let (h, he) = encode(g, p, xv, &input, &spec, None)?;
            let w = g.constant(8, 8, weights.clone())?;
            let hw = g.mul(h, w)?;
            let a = g.sum(hw);
            let w2 = g.constant(2, 8, weights[..16].to_vec())?;
            let hw2 = g.mul(he, w2)?;
            let b = g.sum(hw2);
            let bt = g.tanh(b);
            g.add(a, bt)
        },
        &m.params,
        1e-6,
        &GradCheckOptions { max_elems_per_param: Some(6), ..Default::default() },
    )
    .unwrap();
    assert!(report.max_rel_err() < 1e-4, "{:?}", report.worst());
}

fn exp_sum(v: &[f64]) -> f64 {
    v.iter().map(|x| x.exp()).sum()
}

#[test]
fn step_distributions_normalize_and_respect_masks() {
    let data = toy::corpus(6, 4, 3, 4);
    let m = toy::model(toy::config(8), &data, 13);
    for ex in &data {
        let mut g = Graph::new();
        let enc = m.encode(&mut g, &ex.input, None).unwrap();
        let gold = ex.gold_plan.as_ref().unwrap();
        let state = DecodeState {
            entities: gold.entities()[..2].to_vec(),
            triples: gold.triples()[..2].to_vec(),
            log_prob: 0.0,
        };
        let (le, se) = entity_step(&mut g, &m, &enc, &state).unwrap();
        let (lk, _) = knowledge_step(&mut g, &m, &ex.input, &enc, &state, se, true).unwrap();
        assert!((exp_sum(&le) - 1.0).abs() < 1e-9);
        assert!((exp_sum(&lk) - 1.0).abs() < 1e-9);
        let mask = triple_mask(&ex.input, &state.triples, true);
        for (j, &mk) in mask.iter().enumerate() {
            if mk == BLOCK {
                assert!(lk[j].exp() < 1e-12, "row {j}");
            }
        }
        assert_eq!(mask[ex.input.num_total()], 0.0);
    }
}

#[test]
fn zero_pointer_vector_gives_uniform_choices() {
    let data = toy::corpus(7, 2, 3, 3);
    let mut m = toy::model(toy::config(8), &data, 14);
    set(&mut m, "plan.ent.ptr.v", |_| 0.0);
    set(&mut m, "plan.kn.ptr.v", |_| 0.0);
    let input = &data[0].input;
    let mut g = Graph::new();
    let enc = m.encode(&mut g, input, None).unwrap();
    let state = DecodeState::default();
    let (le, se) = entity_step(&mut g, &m, &enc, &state).unwrap();
    let (lk, _) = knowledge_step(&mut g, &m, input, &enc, &state, se, true).unwrap();
    for &x in &le {
        assert!((x.exp() - 0.25).abs() < 1e-12);
    }
    let open = 9.0 + 1.0;
    for (j, &x) in lk.iter().enumerate() {
        let want = if j < input.num_total() && input.triple(j).is_hol { 0.0 } else { 1.0 / open };
        assert!((x.exp() - want).abs() < 1e-12, "{j}");
    }
}

#[test]
fn argmax_ignores_score_shift() {
    let data = toy::corpus(8, 3, 4, 3);
    let m = toy::model(toy::config(8), &data, 15);
    for ex in &data {
        let mut g = Graph::new();
        let enc = m.encode(&mut g, &ex.input, None).unwrap();
        let s = g.param(&m.params, "plan.kn.start").unwrap();
        let scores = pointer_scores(&mut g, &m, "plan.kn", enc.proj_k, s).unwrap();
        let mask = triple_mask(&ex.input, &[], true);
        let base = g.masked_log_softmax(scores, Some(&mask)).unwrap();
        let want = argmax(g.value(base));
        for c in [-1e3, -2.5, 0.75, 40.0, 1e3] {
            let shifted = g.add_scalar(scores, c);
            let lp = g.masked_log_softmax(shifted, Some(&mask)).unwrap();
            assert_eq!(argmax(g.value(lp)), want);
            for (a, b) in g.value(lp).iter().zip(g.value(base)) {
                assert!((a - b).abs() < 1e-9 * (1.0 + b.abs()));
            }
        }
    }
}

#[test]
fn teacher_forcing_matches_stepwise_decoding() {
    let data = toy::corpus(9, 3, 3, 4);
    let m = toy::model(toy::config(8), &data, 16);
    for ex in &data {
        let gold = ex.gold_plan.as_ref().unwrap();
        let (ents, trips) = (gold.entities(), gold.triples());
        let mut g = Graph::new();
        let enc = m.encode(&mut g, &ex.input, None).unwrap();
        let forced = teacher_forced(&mut g, &m, &ex.input, &enc, &ents, &trips, true).unwrap();
        let (_, ce) = g.dims(forced.entity_logp);
        let (_, ck) = g.dims(forced.triple_logp);
        let fe = g.value(forced.entity_logp).to_vec();
        let fk = g.value(forced.triple_logp).to_vec();
        for t in 0..=trips.len() {
            let state = DecodeState { entities: ents[..t].to_vec(), triples: trips[..t].to_vec(), log_prob: 0.0 };
            let (le, se) = entity_step(&mut g, &m, &enc, &state).unwrap();
            let (lk, _) = knowledge_step(&mut g, &m, &ex.input, &enc, &state, se, true).unwrap();
            for (a, b) in le.iter().zip(&fe[t * ce..(t + 1) * ce]) {
                assert!((a - b).abs() < 1e-10);
            }
            for (a, b) in lk.iter().zip(&fk[t * ck..(t + 1) * ck]) {
                assert!((a - b).abs() < 1e-10 || (*a < -1e8 && *b < -1e8));
            }
        }
    }
}

#[test]
fn entity_decoder_feeds_knowledge_selector() {
    let data = toy::corpus(10, 1, 3, 3);
    let input = &data[0].input;
    let base = toy::model(toy::config(8), &data, 17);
    let mut bumped = base.clone();
    set(&mut bumped, "plan.ent.start", |i| i as f64 * 0.3);
    let dist = |m: &Model| {
        let mut g = Graph::new();
        let enc = m.encode(&mut g, input, None).unwrap();
        let state = DecodeState::default();
        let (_, se) = entity_step(&mut g, m, &enc, &state).unwrap();
        knowledge_step(&mut g, m, input, &enc, &state, se, true).unwrap().0
    };
    assert_ne!(dist(&base), dist(&bumped));
}

#[test]
fn exhausted_triples_force_stop() {
    let data = toy::corpus(11, 1, 2, 3);
    let m = toy::model(toy::config(8), &data, 18);
    let input = &data[0].input;
    let mut g = Graph::new();
    let enc = m.encode(&mut g, input, None).unwrap();
    let rows: Vec<usize> = input.real_rows().collect();
    let state = DecodeState {
        entities: rows.iter().map(|&r| input.triple(r).entity_id).collect(),
        triples: rows,
        log_prob: 0.0,
    };
    let (_, se) = entity_step(&mut g, &m, &enc, &state).unwrap();
    let err = knowledge_step(&mut g, &m, input, &enc, &state, se, true).unwrap_err();
    assert!(matches!(err, skh_core::Error::DegenerateStep));
    for beam in [1, 3] {
        let d = decode_beam(&m, input, &DecodeOptions { max_len: 20, no_repeat: true, beam }).unwrap();
        assert!(d.plan.len() <= input.num_real());
        assert!(d.plan.terminated);
    }
}

#[test]
fn beam_one_is_greedy_and_wider_beams_score_no_lower() {
    let data = toy::corpus(12, 6, 4, 4);
    for seed in 0..8 {
        let m = toy::model(toy::config(8), &data, 100 + seed);
        for ex in &data {
            let mut opts = DecodeOptions { max_len: 12, no_repeat: true, beam: 1 };
            let greedy = decode_greedy(&m, &ex.input, &opts).unwrap();
            assert_eq!(decode_beam(&m, &ex.input, &opts).unwrap(), greedy);
            opts.beam = 5;
            let wide = decode_beam(&m, &ex.input, &opts).unwrap();
            assert!(wide.log_prob >= greedy.log_prob);
            let mut seen = wide.plan.triples();
            seen.sort_unstable();
            seen.dedup();
            assert_eq!(seen.len(), wide.plan.len());
            assert!(wide.plan.validate(&ex.input, false).is_ok());
        }
    }
}
