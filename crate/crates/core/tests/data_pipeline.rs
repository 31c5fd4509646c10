use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use skh_core::realize::{extract_triples, parse_realization, realize_plan, TemplateLibrary};
use skh_core::schema::{
    label_gold_plan_lcs, parse_corpus, tokenize, write_corpus, AttrValue, CorpusMode, LcsOptions, Plan, PlanStep,
    StructuredInput,
};
use skh_core::synth::{generate, Rule, SynthConfig};

fn corpus(seed: u64, n: usize) -> Vec<skh_core::schema::Example> {
    generate(&SynthConfig {
        seed,
        n_examples: n,
        ..Default::default()
    })
    .unwrap()
}

fn bytes(examples: &[skh_core::schema::Example]) -> Vec<u8> {
    let mut buf = Vec::new();
    write_corpus(&mut buf, examples).unwrap();
    buf
}

#[test]
fn synth_is_deterministic_and_seed_sensitive() {
    assert_eq!(bytes(&corpus(7, 50)), bytes(&corpus(7, 50)));
    assert_ne!(bytes(&corpus(7, 50)), bytes(&corpus(8, 50)));
}

/// Top-k rule recomputed from the declared table only.
fn top_k_oracle(input: &StructuredInput) -> Vec<(usize, usize)> {
    let declared = input.to_declared();
    let mut scored: Vec<(i64, usize)> = declared
        .iter()
        .enumerate()
        .map(|(e, (_, attrs))| {
            let pts = attrs.iter().find(|a| a.attr == "points").unwrap();
            (-pts.value.parse::<i64>().unwrap(), e)
        })
        .collect();
    scored.sort();
    let mut out = Vec::new();
    for &(_, e) in scored.iter().take(2) {
        for slot in ["points", "rebounds", "minutes"] {
            let offset = declared[..e].iter().map(|(_, a)| a.len()).sum::<usize>();
            let k = declared[e].1.iter().position(|a| a.attr == slot).unwrap();
            out.push((e, offset + k));
        }
    }
    out
}

#[test]
fn gold_plans_match_independent_rule_and_lcs_recovers_them() {
    let lib = TemplateLibrary::default();
    for ex in corpus(11, 1000) {
        let gold = ex.gold_plan.as_ref().unwrap();
        let as_real: Vec<(usize, usize)> = gold
            .steps
            .iter()
            .map(|s| (s.entity, ex.input.flat_to_real(s.triple).unwrap()))
            .collect();
        assert_eq!(as_real, top_k_oracle(&ex.input), "{}", ex.id);
        let reference = ex.reference.as_deref().unwrap();
        assert_eq!(reference, realize_plan(gold, &ex.input, &lib));
        let labeled = label_gold_plan_lcs(reference, &ex.input, &LcsOptions::default());
        assert_eq!(&labeled, gold, "{}: {reference}", ex.id);
    }
}

fn points(input: &StructuredInput) -> Vec<i64> {
    input
        .to_declared()
        .iter()
        .map(|(_, attrs)| attrs.iter().find(|a| a.attr == "points").unwrap().value.parse().unwrap())
        .collect()
}

#[test]
fn default_scores_are_distinct_within_an_example() {
    for ex in corpus(12, 300) {
        let mut pts = points(&ex.input);
        pts.sort_unstable();
        pts.dedup();
        assert_eq!(pts.len(), 6, "{}", ex.id);
    }
}

#[test]
fn score_ties_break_by_entity_index() {
    let data = generate(&SynthConfig {
        seed: 13,
        n_examples: 300,
        distinct_scores: false,
        ..Default::default()
    })
    .unwrap();
    let mut ties = 0;
    for ex in &data {
        let pts = points(&ex.input);
        let mut sorted = pts.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        ties += usize::from(sorted[0] == sorted[1] || sorted[1] == sorted[2]);
        let gold = ex.gold_plan.as_ref().unwrap();
        let as_real: Vec<(usize, usize)> = gold
            .steps
            .iter()
            .map(|s| (s.entity, ex.input.flat_to_real(s.triple).unwrap()))
            .collect();
        assert_eq!(as_real, top_k_oracle(&ex.input), "{}", ex.id);
    }
    assert!(ties > 10, "only {ties} ties");
}

#[test]
fn corpus_round_trips_through_files() {
    let dir = tempfile::tempdir().unwrap();
    for dialogue in [false, true] {
        let ex = generate(&SynthConfig {
            seed: 3,
            n_examples: 40,
            dialogue,
            ..Default::default()
        })
        .unwrap();
        let path = dir.path().join("c.jsonl");
        skh_core::schema::save_corpus(&path, &ex).unwrap();
        let mode = if dialogue { CorpusMode::Dialogue } else { CorpusMode::Table };
        let back = skh_core::schema::load_corpus(&path, mode).unwrap();
        assert_eq!(back, ex);
        assert_eq!(bytes(&back), std::fs::read(&path).unwrap());
    }
}

fn random_plan(rng: &mut ChaCha8Rng, input: &StructuredInput) -> Plan {
    let rows: Vec<usize> = input.real_rows().collect();
    let len = rng.random_range(0..10);
    let steps = (0..len)
        .map(|_| {
            let triple = rows[rng.random_range(0..rows.len())];
            PlanStep {
                entity: input.triple(triple).entity_id,
                triple,
            }
        })
        .collect();
    Plan::new(steps, true)
}

#[test]
fn extract_inverts_realize_on_random_plans() {
    let lib = TemplateLibrary::default();
    let examples = corpus(5, 100);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for i in 0..1000 {
        let input = &examples[i % examples.len()].input;
        let plan = random_plan(&mut rng, input);
        let text = realize_plan(&plan, input, &lib);
        assert_eq!(extract_triples(&text, input, &lib), plan.triples(), "{text}");
    }
}

#[test]
fn realize_is_injective_on_distinct_plans() {
    let lib = TemplateLibrary::default();
    let input = &corpus(9, 1)[0].input;
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut seen = std::collections::HashMap::new();
    for _ in 0..2000 {
        let plan = random_plan(&mut rng, input);
        let text = realize_plan(&plan, input, &lib);
        if let Some(prev) = seen.insert(text.clone(), plan.triples()) {
            assert_eq!(prev, plan.triples(), "{text}");
        }
    }
}

/// Two teams and two players with nine attributes each; missing cells are N/A.
fn box_score() -> StructuredInput {
    let row = |vals: [(&str, &str); 9]| {
        vals.iter()
            .map(|(a, v)| {
                if v.parse::<f64>().is_ok() {
                    AttrValue::number(*a, *v)
                } else {
                    AttrValue::text(*a, *v)
                }
            })
            .collect::<Vec<_>>()
    };
    let team = |pts, reb, ast, wins, losses| {
        row([
            ("points", pts),
            ("rebounds", reb),
            ("assists", ast),
            ("FGM", "N/A"),
            ("FGA", "N/A"),
            ("FTM", "N/A"),
            ("FTA", "N/A"),
            ("wins", wins),
            ("losses", losses),
        ])
    };
    StructuredInput::new(
        vec![
            ("Nets".into(), team("102", "41", "22", "12", "30")),
            ("Knicks".into(), team("99", "38", "19", "20", "22")),
            (
                "Brook_Lopez".into(),
                row([
                    ("points", "26"),
                    ("FGM", "12"),
                    ("FGA", "22"),
                    ("FTM", "2"),
                    ("FTA", "3"),
                    ("rebounds", "9"),
                    ("minutes", "32"),
                    ("assists", "N/A"),
                    ("FG3M", "N/A"),
                ]),
            ),
            (
                "Joe_Johnson".into(),
                row([
                    ("points", "12"),
                    ("FGM", "5"),
                    ("FGA", "12"),
                    ("FTM", "2"),
                    ("FTA", "2"),
                    ("rebounds", "4"),
                    ("minutes", "35"),
                    ("assists", "3"),
                    ("FG3M", "N/A"),
                ]),
            ),
        ],
        None,
    )
    .unwrap()
}

#[test]
fn box_score_sentinel_count() {
    let input = box_score();
    assert_eq!(input.num_entities(), 4);
    assert_eq!(input.num_total(), 40);
    assert_eq!(input.num_real(), 36);
    assert_eq!(input.triples().iter().filter(|t| t.is_hol).count(), 4);
}

#[test]
fn written_box_score_sentence_extracts_seven_triples() {
    let input = box_score();
    let lib = TemplateLibrary::default();
    let s4 = "Brook_Lopez finished with 26 points ( 12 - 22 FG, 2 - 3 FT ) and 9 rebounds in 32 minutes.";
    assert_eq!(parse_realization(s4, &input, &lib), None);
    let got = extract_triples(s4, &input, &lib);
    let lopez: Vec<usize> = input.entity_rows(2).take(7).collect();
    assert_eq!(got, lopez);
}

#[test]
fn lcs_labels_points_then_rebounds() {
    let input = box_score();
    let plan = label_gold_plan_lcs("Brook_Lopez scored 26 points and 9 rebounds", &input, &LcsOptions::default());
    let attrs: Vec<&str> = plan.triples().iter().map(|&t| input.triple(t).attribute.as_str()).collect();
    assert_eq!(attrs, vec!["points", "rebounds"]);
    assert_eq!(plan.entities(), vec![2, 2]);
}

#[test]
fn lcs_single_exact_value() {
    let input = box_score();
    // 35 only occurs as Joe_Johnson's minutes
    let plan = label_gold_plan_lcs("a long 35 stretch", &input, &LcsOptions::default());
    let t = input.entity_rows(3).nth(6).unwrap();
    assert_eq!(plan.triples(), vec![t]);
    assert_eq!(plan.entities(), vec![3]);
}

#[test]
fn corpus_accepts_box_score_records() {
    let record = r#"{"id":"g1","entities":[{"name":"Nets","triples":[{"attr":"points","value":"102","kind":"number"}]},{"name":"Brook_Lopez","triples":[{"attr":"points","value":"26","kind":"number"},{"attr":"assists","value":"N/A","kind":"text"}]}],"reference":"Brook_Lopez finished with 26 points."}"#;
    let ex = parse_corpus(record, CorpusMode::Table).unwrap();
    assert_eq!(ex[0].input.num_total(), 5);
    assert!(ex[0].gold_plan.is_none());
}

proptest! {
    #[test]
    fn lcs_plans_are_consistent_and_ordered(words in prop::collection::vec(0usize..60, 0..40), seed in 0u64..50) {
        let input = &corpus(seed, 1)[0].input;
        let vocab: Vec<String> = input
            .triples()
            .iter()
            .filter(|t| !t.is_hol)
            .map(|t| t.value.clone())
            .chain(input.entities().iter().map(|e| e.name.clone()))
            .chain(["points", "rebounds", "and", "the"].iter().map(|s| s.to_string()))
            .collect();
        let text: Vec<String> = words.iter().map(|&w| vocab[w % vocab.len()].clone()).collect();
        let text = text.join(" ");
        let plan = label_gold_plan_lcs(&text, input, &LcsOptions::default());
        prop_assert!(plan.validate(input, true).is_ok());
        let mut seen = std::collections::HashSet::new();
        for t in plan.triples() {
            prop_assert!(seen.insert(t));
        }
        // each step's value occurs in the text after the previous step's match
        let toks = tokenize(&text);
        let mut cursor = 0;
        for t in plan.triples() {
            let v = tokenize(&input.triple(t).value);
            let pos = (cursor..toks.len()).find(|&i| toks[i] == v[0]);
            prop_assert!(pos.is_some(), "step value {:?} not found after {}", v, cursor);
            cursor = pos.unwrap() + 1;
        }
    }
}

#[test]
fn other_rules_generate_valid_gold() {
    for rule in [
        Rule::Threshold {
            min: 30,
            score: "points".into(),
            slots: vec!["points".into()],
        },
        Rule::FixedSlots {
            entities: vec![3, 0],
            slots: vec!["college".into(), "assists".into()],
        },
    ] {
        let ex = generate(&SynthConfig {
            seed: 1,
            n_examples: 50,
            rule: rule.clone(),
            ..Default::default()
        })
        .unwrap();
        for e in &ex {
            let gold = e.gold_plan.as_ref().unwrap();
            assert!(gold.validate(&e.input, true).is_ok());
            if let Rule::FixedSlots { .. } = rule {
                assert_eq!(gold.entities(), vec![3, 3, 0, 0]);
            }
        }
    }
}
