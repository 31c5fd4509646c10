#![allow(dead_code)]

pub mod dld_oracle {
    //! Damerau-Levenshtein distances by breadth-first search over edit
    //! operations on strings of a 4-symbol alphabet.

    pub const ALPHABET: usize = 4;

    /// Index of a string among all strings of length <= cap, shortest first.
    pub struct Codec {
        offsets: Vec<usize>,
        pub cap: usize,
    }

    impl Codec {
        pub fn new(cap: usize) -> Self {
            let mut offsets = vec![0];
            for l in 0..=cap {
                offsets.push(offsets[l] + ALPHABET.pow(l as u32));
            }
            Self { offsets, cap }
        }

        pub fn count(&self, max_len: usize) -> usize {
            self.offsets[max_len + 1]
        }

        pub fn encode(&self, s: &[u8]) -> usize {
            self.offsets[s.len()] + s.iter().fold(0, |acc, &c| acc * ALPHABET + c as usize)
        }

        pub fn decode(&self, idx: usize) -> Vec<u8> {
            let len = (0..=self.cap).rev().find(|&l| self.offsets[l] <= idx).unwrap();
            let mut v = idx - self.offsets[len];
            let mut out = vec![0u8; len];
            for slot in out.iter_mut().rev() {
                *slot = (v % ALPHABET) as u8;
                v /= ALPHABET;
            }
            out
        }
    }

    /// Distances from `source` to every string of length <= `codec.cap`.
    pub fn bfs(codec: &Codec, source: &[u8]) -> Vec<u8> {
        let n = codec.count(codec.cap);
        let mut dist = vec![u8::MAX; n];
        let mut frontier = vec![codec.encode(source)];
        dist[frontier[0]] = 0;
        let mut d = 0u8;
        while !frontier.is_empty() {
            d += 1;
            let mut next = Vec::new();
            for &idx in &frontier {
                let s = codec.decode(idx);
                let mut visit = |t: Vec<u8>, next: &mut Vec<usize>| {
                    if t.len() <= codec.cap {
                        let j = codec.encode(&t);
                        if dist[j] == u8::MAX {
                            dist[j] = d;
                            next.push(j);
                        }
                    }
                };
                for i in 0..s.len() {
                    let mut t = s.clone();
                    t.remove(i);
                    visit(t, &mut next);
                    for c in 0..ALPHABET as u8 {
                        if c != s[i] {
                            let mut t = s.clone();
                            t[i] = c;
                            visit(t, &mut next);
                        }
                    }
                    if i + 1 < s.len() && s[i] != s[i + 1] {
                        let mut t = s.clone();
                        t.swap(i, i + 1);
                        visit(t, &mut next);
                    }
                }
                for i in 0..=s.len() {
                    for c in 0..ALPHABET as u8 {
                        let mut t = s.clone();
                        t.insert(i, c);
                        visit(t, &mut next);
                    }
                }
            }
            frontier = next;
        }
        dist
    }

    /// Relabels symbols in order of first appearance in `a`; returns the
    /// relabeled `a` and the full permutation (unseen symbols keep their order).
    pub fn canonical(a: &[u8]) -> (Vec<u8>, [u8; ALPHABET]) {
        let mut perm = [u8::MAX; ALPHABET];
        let mut next = 0u8;
        for &c in a {
            if perm[c as usize] == u8::MAX {
                perm[c as usize] = next;
                next += 1;
            }
        }
        for slot in perm.iter_mut() {
            if *slot == u8::MAX {
                *slot = next;
                next += 1;
            }
        }
        (a.iter().map(|&c| perm[c as usize]).collect(), perm)
    }

    /// Exhaustive oracle for all strings of length <= `max_len`: distances
    /// are computed from canonical sources only, since the metric is
    /// invariant under a relabeling of the alphabet.
    pub struct Oracle {
        pub codec: Codec,
        pub max_len: usize,
        tables: std::collections::HashMap<Vec<u8>, Vec<u8>>,
    }

    impl Oracle {
        pub fn new(max_len: usize) -> Self {
            let codec = Codec::new(max_len + 1);
            let mut tables = std::collections::HashMap::new();
            for idx in 0..codec.count(max_len) {
                let (canon, _) = canonical(&codec.decode(idx));
                tables.entry(canon).or_insert_with_key(|c| bfs(&codec, c));
            }
            Self { codec, max_len, tables }
        }

        pub fn sources(&self) -> usize {
            self.tables.len()
        }

        pub fn distance(&self, a: &[u8], b: &[u8]) -> usize {
            let (canon, perm) = canonical(a);
            let mapped: Vec<u8> = b.iter().map(|&c| perm[c as usize]).collect();
            self.tables[&canon][self.codec.encode(&mapped)] as usize
        }
    }
}

pub mod toy {
    //! Small models and corpora for property tests.

    use skh_core::embed::{EmbedOptions, Vocab};
    use skh_core::model::{Model, ModelConfig};
    use skh_core::schema::Example;
    use skh_core::synth::{generate, SynthConfig};

    pub fn config(d_model: usize) -> ModelConfig {
        ModelConfig {
            d_model,
            d_emb: d_model,
            n_heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            d_ff: 2 * d_model,
            n_fusion: 2,
            dropout: 0.0,
            max_steps: 24,
            // toy vocabularies come from a handful of examples; keep every token
            embed: EmbedOptions { word_min_count: 1, ..EmbedOptions::default() },
            ..ModelConfig::default()
        }
    }

    pub fn corpus(seed: u64, n: usize, entities: usize, attrs: usize) -> Vec<Example> {
        generate(&SynthConfig {
            seed,
            n_examples: n,
            n_entities: entities,
            n_attrs: attrs,
            ..SynthConfig::default()
        })
        .unwrap()
    }

    pub fn model(config: ModelConfig, examples: &[Example], seed: u64) -> Model {
        let vocab = Vocab::build(examples, &config.embed);
        Model::new(config, vocab, seed).unwrap()
    }

    /// Two entities with three attributes each, gold plan covering all six.
    pub fn two_entity() -> (Model, Example) {
        let ex = corpus(7, 1, 2, 3).remove(0);
        let m = model(config(8), std::slice::from_ref(&ex), 11);
        (m, ex)
    }
}
