//! Acceptance suite. One line per criterion; exits non-zero if any fails.

use std::collections::BTreeSet;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use mtltext::config::{Role, RunConfig, TaskConfig};
use mtltext::embed::EncodedExample;
use mtltext::experiment::{cross_validate, prepare, Prepared, Resources};
use mtltext::folds::stratified_kfold;
use mtltext::gradcheck::{grad_check, GradCheckOptions, GradCheckReport, Objective};
use mtltext::graph::{Activation, Feed, Graph, GraphBuilder, NodeId};
use mtltext::metrics::{compute_metrics, percent, ConfusionMatrix};
use mtltext::models::{
    build_concat_model, build_shared_network, build_single_task, build_soft_shared, build_word_cnn,
    cross_transform_count, derive_task_head, forward_all, Architecture, CharCnnSpec, EmbeddingInput, Model, NetConfig,
    SubwordInput, TaskSpec, WordCnnSpec, EMBED_TABLE,
};
use mtltext::params::ParamStore;
use mtltext::preprocess::{segment, segment_hashtag, SegmenterLexicon};
use mtltext::report::{check_published, PublishedScores, AGGREGATION_TOLERANCE_PP};
use mtltext::seed::rng_for;
use mtltext::synth::{write_csv, KeywordTask};
use mtltext::tensor::Tensor;
use mtltext::train::{batch_shares, evaluate, train_shared_network, train_stl, TaskData, TrainConfig};
use rand::Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------- 1

const GRAD_TOL: f64 = 1e-4;

fn random(rng: &mut impl Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

fn check(
    name: &str,
    g: &Graph,
    store: &ParamStore,
    feed: &Feed,
    obj: Objective,
    seed: u64,
) -> Result<GradCheckReport, String> {
    let opts = GradCheckOptions {
        probes: 100,
        seed,
        ..GradCheckOptions::default()
    };
    let r = grad_check(g, store, feed, obj, opts).map_err(|e| format!("{name}: {e}"))?;
    ensure(r.probes >= 100, || format!("{name}: only {} usable probes", r.probes))?;
    ensure(r.max_rel_error() <= GRAD_TOL, || format!("{name}: {:?}", r.worst()))?;
    Ok(r)
}

struct Prim {
    gb: GraphBuilder,
    store: ParamStore,
    feed: Feed,
    rng: rand_chacha::ChaCha8Rng,
}

impl Prim {
    fn new(seed: u64) -> Self {
        Prim {
            gb: GraphBuilder::new(),
            store: ParamStore::new(),
            feed: Feed::new(),
            rng: rng_for(seed, "prim"),
        }
    }

    fn param(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        let t = random(&mut self.rng, shape, 1.0).with_trainable(true);
        let id = self.store.add(name, t).unwrap();
        self.gb.param(&self.store, id)
    }

    fn input(&mut self, name: &str, shape: Vec<usize>) -> NodeId {
        let t = random(&mut self.rng, shape.clone(), 1.0);
        self.feed.insert(name, t);
        self.gb.input(name, shape)
    }

    fn ids(&mut self, name: &str, ids: Vec<usize>) -> NodeId {
        let n = ids.len();
        self.feed
            .insert(name, Tensor::vector(ids.into_iter().map(|i| i as f64).collect()));
        self.gb.input(name, vec![n])
    }

    /// Gradient check of a random projection of `out`.
    fn run(mut self, name: &str, out: NodeId, seed: u64) -> Result<GradCheckReport, String> {
        let n: usize = self.gb.shape(out).iter().product();
        let w: Vec<f64> = (0..n).map(|_| self.rng.gen_range(-1.0..1.0)).collect();
        let g = self.gb.finish();
        check(
            name,
            &g,
            &self.store,
            &self.feed,
            Objective::Projection { node: out, weights: &w },
            seed,
        )
    }
}

fn primitive_checks() -> Result<Vec<(String, GradCheckReport)>, String> {
    let mut out = Vec::new();
    let mut push = |name: &str, r: Result<GradCheckReport, String>| -> Result<(), String> {
        out.push((name.to_string(), r?));
        Ok(())
    };
    for (k, static_padding) in [false, true].into_iter().enumerate() {
        let mut p = Prim::new(10 + k as u64);
        let t = p.param("table", vec![7, 5]);
        // a static padding row is a stop-gradient, so only probe other rows
        let ids = p.ids(
            "ids",
            if static_padding {
                vec![2, 3, 6, 3, 1]
            } else {
                vec![0, 3, 6, 3, 1]
            },
        );
        let e = p.gb.embed_lookup(t, ids, static_padding).map_err(err)?;
        let f = p.gb.flatten(e, "flat");
        push(
            &format!("embed_lookup(static_padding={static_padding})"),
            p.run("embed_lookup", f, 1),
        )?;
    }
    {
        let mut p = Prim::new(12);
        let t = p.param("subwords", vec![9, 4]);
        let ids = p.ids("ids", vec![0, 1, 2, 1]);
        let bags = Arc::new(vec![vec![], vec![0, 3, 8], vec![5, 5, 2]]);
        let e = p.gb.bag_embed(t, ids, bags).map_err(err)?;
        let f = p.gb.flatten(e, "flat");
        push("bag_embed", p.run("bag_embed", f, 2))?;
    }
    for (k, act) in [Activation::Identity, Activation::Relu, Activation::Tanh]
        .into_iter()
        .enumerate()
    {
        for stride in [1, 2] {
            let mut p = Prim::new(20 + k as u64 * 2 + stride as u64);
            let x = p.input("x", vec![9, 4]);
            let w = p.param("w", vec![3, 3, 4]);
            let b = p.param("b", vec![3]);
            let c = p.gb.conv1d(x, w, b, stride, act, "conv").map_err(err)?;
            let f = p.gb.flatten(c, "flat");
            push(&format!("conv1d({act:?}, stride {stride})"), p.run("conv1d", f, 3))?;
        }
        let mut p = Prim::new(40 + k as u64);
        let x = p.input("x", vec![6]);
        let w = p.param("w", vec![4, 6]);
        let b = p.param("b", vec![4]);
        let d = p.gb.dense(x, w, b, act, "dense").map_err(err)?;
        push(&format!("dense({act:?})"), p.run("dense", d, 4))?;
    }
    {
        let mut p = Prim::new(50);
        let x = p.param("x", vec![7, 3]);
        let m = p.gb.global_maxpool(x, "gmp").map_err(err)?;
        push("global_maxpool", p.run("global_maxpool", m, 5))?;
    }
    {
        let mut p = Prim::new(51);
        let x = p.param("x", vec![8, 3]);
        let m = p.gb.windowed_maxpool(x, 3, "wmp").map_err(err)?;
        let f = p.gb.flatten(m, "flat");
        push("windowed_maxpool", p.run("windowed_maxpool", f, 6))?;
    }
    {
        let mut p = Prim::new(52);
        let x = p.param("x", vec![5]);
        let s = p.gb.softmax(x, "softmax").map_err(err)?;
        push("softmax", p.run("softmax", s, 7))?;
    }
    {
        let mut p = Prim::new(53);
        let x = p.input("x", vec![5]);
        let w = p.param("w", vec![3, 5]);
        let b = p.param("b", vec![3]);
        let logits = p.gb.dense(x, w, b, Activation::Identity, "logits").map_err(err)?;
        let s = p.gb.softmax(logits, "softmax").map_err(err)?;
        p.gb.mark_output(s);
        let g = p.gb.finish();
        let r = check(
            "softmax+cross-entropy",
            &g,
            &p.store,
            &p.feed,
            Objective::CrossEntropy { output: s, class: 2 },
            8,
        )?;
        push("softmax+cross-entropy", Ok(r))?;
    }
    {
        let mut p = Prim::new(54);
        let h = p.param("h", vec![6, 4]);
        let w = p.param("w", vec![4]);
        let b = p.param("b", vec![1]);
        let a = p.gb.attention_pool(h, w, b, "att").map_err(err)?;
        push("attention_pool", p.run("attention_pool", a, 9))?;
    }
    for axis in [0, 1] {
        let mut p = Prim::new(55 + axis as u64);
        let a = p.param("a", vec![3, 2]);
        let b = p.param("b", vec![3, 2]);
        let c = p.gb.concat(&[a, b], axis, "cat").map_err(err)?;
        let f = p.gb.flatten(c, "flat");
        push(&format!("concat(axis {axis})"), p.run("concat", f, 10))?;
    }
    {
        let mut p = Prim::new(57);
        let a = p.param("a", vec![4]);
        let b = p.param("b", vec![4]);
        let s = p.gb.sum(&[a, b, a], "sum").map_err(err)?;
        push("sum", p.run("sum", s, 11))?;
    }
    Ok(out)
}

fn desk_net() -> NetConfig {
    NetConfig {
        seq_len: 12,
        char_len: 32,
        word: WordCnnSpec {
            windows: vec![3, 4, 5],
            filters: 8,
            hidden: vec![8],
        },
        char: CharCnnSpec {
            strides: [1, 2],
            filters: 8,
            hidden: 8,
            ..CharCnnSpec::default()
        },
    }
}

const DESK_VOCAB: usize = 40;
const DESK_DIM: usize = 16;

fn desk_input(trainable_subwords: bool) -> EmbeddingInput {
    let mut rng = rng_for(5, "desk-input");
    if !trainable_subwords {
        let mut t = random(&mut rng, vec![DESK_VOCAB, DESK_DIM], 0.5);
        t.values_mut()[..DESK_DIM].iter_mut().for_each(|v| *v = 0.0);
        return EmbeddingInput::fixed(t);
    }
    let mut words = random(&mut rng, vec![DESK_VOCAB, DESK_DIM / 2], 0.5);
    words.values_mut()[..DESK_DIM / 2].iter_mut().for_each(|v| *v = 0.0);
    let sub = random(&mut rng, vec![25, DESK_DIM / 2], 0.5);
    let bags = (0..DESK_VOCAB)
        .map(|w| {
            if w == 0 {
                vec![]
            } else {
                (0..3).map(|j| (w * 7 + j * 5) % 25).collect()
            }
        })
        .collect();
    EmbeddingInput {
        table: words,
        subword: Some(SubwordInput {
            table: sub,
            bags: Arc::new(bags),
        }),
    }
}

fn desk_example(seed: u64, label: usize, task: usize) -> EncodedExample {
    let mut rng = rng_for(seed, "desk-example");
    let mut tokens: Vec<usize> = (0..9).map(|_| rng.gen_range(1..DESK_VOCAB)).collect();
    tokens.resize(12, 0);
    let chars = (0..26).map(|_| rng.gen_range(0..27) as u8).collect();
    EncodedExample {
        tokens,
        chars,
        char_len: 32,
        label,
        task,
    }
}

fn check_model(name: &str, model: &Model, store: &ParamStore, seed: u64) -> Result<GradCheckReport, String> {
    let mut worst: Option<GradCheckReport> = None;
    for (h, head) in model.heads.iter().enumerate() {
        let class = head.offset + head.classes - 1;
        let label = format!("{name} head {}", head.task);
        // redraw the example until the point is away from relu and max-pool kinks
        let mut result = Err(format!("{label}: no smooth example found"));
        for attempt in 0..20 {
            let ex = desk_example(seed * 1000 + h as u64 * 100 + attempt, head.classes - 1, h);
            let feed = ex.feed(&model.graph);
            result = check(
                &label,
                &model.graph,
                store,
                &feed,
                Objective::CrossEntropy {
                    output: head.output,
                    class,
                },
                seed,
            );
            if !matches!(&result, Err(e) if e.contains("usable probes")) {
                break;
            }
        }
        let r = result?;
        if worst.as_ref().is_none_or(|w| r.max_rel_error() > w.max_rel_error()) {
            worst = Some(r);
        }
    }
    worst.ok_or_else(|| format!("{name}: no heads"))
}

/// Perturbs every parameter so zero-initialised transforms and biases are
/// exercised away from zero.
fn jitter(store: &mut ParamStore, seed: u64) {
    let mut rng = rng_for(seed, "jitter");
    for p in store.iter_mut().filter(|p| p.name != EMBED_TABLE) {
        for v in p.tensor.values_mut() {
            *v += rng.gen_range(-0.2..0.2);
        }
    }
}

fn model_checks() -> Result<Vec<(String, GradCheckReport)>, String> {
    let net = desk_net();
    let d1 = TaskSpec::new("D1", &["none", "hate"]);
    let d2 = TaskSpec::new("D2", &["none", "hate", "offensive"]);
    let s = TaskSpec::new("S", &["negative", "neutral", "positive"]);
    let mut out = Vec::new();
    let archs = [
        (1, Architecture::Word, false),
        (2, Architecture::Word, true),
        (3, Architecture::Char, false),
        (4, Architecture::Hybrid, false),
        (5, Architecture::Attention, false),
    ];
    for (variant, arch, trainable) in archs {
        let input = desk_input(trainable);
        let mut store = ParamStore::new();
        let m = build_single_task(arch, &net, &input, &d1, &mut store, variant).map_err(err)?;
        jitter(&mut store, variant);
        out.push((
            format!("model {variant}"),
            check_model(&format!("model {variant}"), &m, &store, variant)?,
        ));
    }
    let input = desk_input(true);
    let mut sn_store = ParamStore::new();
    let sn = build_shared_network(&net, &input, &[d1.clone(), d2.clone()], &mut sn_store, 6).map_err(err)?;
    jitter(&mut sn_store, 6);
    out.push((
        "model 6 shared network".into(),
        check_model("model 6 shared network", &sn.model, &sn_store, 6)?,
    ));
    let head = derive_task_head(&sn, &sn_store, &input, &d1, 60).map_err(err)?;
    out.push((
        "model 6 head".into(),
        check_model("model 6 head", &head.model, &head.store, 60)?,
    ));

    let mut sn7_store = ParamStore::new();
    let sn7 = build_shared_network(&net, &input, &[d1.clone(), s.clone()], &mut sn7_store, 7).map_err(err)?;
    jitter(&mut sn7_store, 7);
    out.push((
        "model 7 shared network".into(),
        check_model("model 7 shared network", &sn7.model, &sn7_store, 7)?,
    ));
    let head7 = derive_task_head(&sn7, &sn7_store, &input, &d1, 70).map_err(err)?;
    out.push((
        "model 7 head".into(),
        check_model("model 7 head", &head7.model, &head7.store, 70)?,
    ));

    let concat = build_concat_model((&sn, &sn_store), (&sn7, &sn7_store), &input, &d1, 8).map_err(err)?;
    out.push((
        "model 8".into(),
        check_model("model 8", &concat.model, &concat.store, 8)?,
    ));

    for (variant, tasks) in [(9, vec![d1.clone(), d2.clone()]), (10, vec![d1.clone(), s.clone()])] {
        let mut store = ParamStore::new();
        let seeds: Vec<u64> = (0..tasks.len() as u64).map(|i| variant * 10 + i).collect();
        let ssn = build_soft_shared(&net, &input, &tasks, &mut store, &seeds).map_err(err)?;
        jitter(&mut store, variant);
        let name = format!("model {variant}");
        out.push((name.clone(), check_model(&name, &ssn.model, &store, variant)?));
    }
    Ok(out)
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let prims = primitive_checks()?;
    let models = model_checks()?;
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 120.0, || format!("took {secs:.1}s"))?;
    let all: Vec<_> = prims.iter().chain(&models).collect();
    let worst = all.iter().map(|(_, r)| r.max_rel_error()).fold(0.0, f64::max);
    let probes: usize = all.iter().map(|(_, r)| r.probes).sum();
    Ok(format!(
        "{} primitive graphs and {} model graphs, {probes} probes, max relative error {worst:.2e}, {secs:.1}s",
        prims.len(),
        models.len()
    ))
}

// ---------------------------------------------------------------- 2

fn binary(labels: [&str; 2], counts: [[u64; 2]; 2]) -> ConfusionMatrix {
    ConfusionMatrix::from_counts(
        labels.iter().map(|s| s.to_string()).collect(),
        counts.iter().map(|r| r.to_vec()).collect(),
    )
    .unwrap()
}

fn criterion_2() -> Outcome {
    let d2 = binary(["hate", "non-hate"], [[862, 398], [944, 796]]);
    let d3 = binary(["hate", "non-hate"], [[190, 98], [120, 745]]);
    let d1 = binary(["hate", "non-hate"], [[844, 253], [136, 8435]]);
    let mut lines = Vec::new();
    for (name, cm, acc, macro_f) in [
        ("D2 matrix", &d2, "55.27", "55.25"),
        ("D3 matrix", &d3, "81.09", "75.39"),
        ("D1 matrix", &d1, "95.98", "89.51"),
    ] {
        let m = compute_metrics(cm).map_err(err)?;
        ensure(percent(m.accuracy) == acc && percent(m.macro_f1) == macro_f, || {
            format!("{name}: got {}/{}", percent(m.accuracy), percent(m.macro_f1))
        })?;
        lines.push(format!("{name} {acc}/{macro_f}"));
    }
    let published = |m, w, a| PublishedScores {
        macro_f1: m,
        weighted_f1: w,
        accuracy: a,
    };
    let f_d2 = check_published(
        &published(Some(55.24), None, Some(55.26)),
        &d2,
        AGGREGATION_TOLERANCE_PP,
    )
    .map_err(err)?;
    ensure(!f_d2.flagged, || format!("D2 scores flagged at {:.3}pp", f_d2.gap_pp))?;
    let f_d3 = check_published(
        &published(Some(75.39), None, Some(81.09)),
        &d3,
        AGGREGATION_TOLERANCE_PP,
    )
    .map_err(err)?;
    ensure(!f_d3.flagged, || format!("D3 scores flagged at {:.3}pp", f_d3.gap_pp))?;
    let f_d1 = check_published(
        &published(Some(90.55), Some(96.35), Some(96.52)),
        &d1,
        AGGREGATION_TOLERANCE_PP,
    )
    .map_err(err)?;
    ensure(f_d1.flagged, || "D1 fold-average discrepancy was not flagged".into())?;
    Ok(format!(
        "{}; D2/D3 scores consistent (gaps {:.3}/{:.3}pp); D1 fold average flagged at {:.2}pp",
        lines.join(", "),
        f_d2.gap_pp,
        f_d3.gap_pp,
        f_d1.gap_pp
    ))
}

// ---------------------------------------------------------------- 3

fn exhaustive(text: &str, lex: &SegmenterLexicon) -> (f64, usize) {
    let chars: Vec<char> = text.chars().collect();
    let n = chars.len();
    let lp: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            (0..=n)
                .map(|j| {
                    if j > i {
                        lex.log_prob(&chars[i..j].iter().collect::<String>())
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect();
    let mut best = (f64::NEG_INFINITY, usize::MAX);
    for mask in 0u32..(1 << (n - 1)) {
        let mut score = 0.0;
        let mut words = 0;
        let mut start = 0;
        for i in 1..=n {
            if i == n || mask & (1 << (i - 1)) != 0 {
                score += lp[start][i];
                words += 1;
                start = i;
            }
        }
        if score > best.0 || (score == best.0 && words < best.1) {
            best = (score, words);
        }
    }
    best
}

fn criterion_3() -> Outcome {
    let fixtures: [(&str, &[&str]); 7] = [
        ("BuildTheWall", &["build", "the", "wall"]),
        ("SendthemBack", &["send", "them", "back"]),
        ("refugeeswelcome", &["refugees", "welcome"]),
        ("humantrafficking", &["human", "trafficking"]),
        ("whitegenocides", &["white", "genocides"]),
        ("makeLoveNotWar", &["make", "love", "not", "war"]),
        ("F**kracism", &["f**k", "racism"]),
    ];
    let words: BTreeSet<&str> = fixtures.iter().flat_map(|(_, w)| w.iter().copied()).collect();
    let lex = SegmenterLexicon::from_counts(words.iter().map(|&w| (w, 10))).map_err(err)?;
    for (tag, expected) in fixtures {
        let got = segment_hashtag(tag, &lex);
        ensure(got == expected, || format!("#{tag} → {got:?}"))?;
    }

    let toy = [
        ("a", 40),
        ("an", 25),
        ("and", 30),
        ("the", 60),
        ("then", 12),
        ("he", 35),
        ("hen", 4),
        ("at", 20),
        ("hat", 6),
        ("tan", 3),
    ];
    let lex = SegmenterLexicon::from_counts(toy).map_err(err)?;
    let alphabet: Vec<char> = "adehnt".chars().collect();
    let mut strings: BTreeSet<String> = BTreeSet::new();
    // every concatenation of toy words up to 8 chars, and a sample up to 12
    let mut frontier = vec![String::new()];
    let mut longer = Vec::new();
    while let Some(s) = frontier.pop() {
        for (w, _) in toy {
            let t = format!("{s}{w}");
            match t.chars().count() {
                0..=8 => {
                    if strings.insert(t.clone()) {
                        frontier.push(t);
                    }
                }
                9..=12 => longer.push(t),
                _ => {}
            }
        }
    }
    let mut rng = rng_for(3, "segment-strings");
    longer.sort();
    longer.dedup();
    for _ in 0..3000 {
        strings.insert(longer[rng.gen_range(0..longer.len())].clone());
    }
    // every string over the alphabet up to 5 chars, plus random ones to 12
    let mut short = vec![String::new()];
    for _ in 0..5 {
        short = short
            .iter()
            .flat_map(|s| alphabet.iter().map(move |c| format!("{s}{c}")))
            .collect();
        strings.extend(short.iter().cloned());
    }
    for _ in 0..3000 {
        let n = rng.gen_range(6..=12);
        strings.insert((0..n).map(|_| alphabet[rng.gen_range(0..alphabet.len())]).collect());
    }
    for s in &strings {
        let dp = segment(s, &lex);
        let score: f64 = dp.iter().map(|w| lex.log_prob(w)).sum();
        let (best, words) = exhaustive(s, &lex);
        ensure(
            (score - best).abs() <= 1e-9 * best.abs().max(1.0) && dp.len() == words,
            || format!("'{s}': dp {dp:?} scores {score}, enumeration {best} with {words} words"),
        )?;
        ensure(dp.concat() == *s, || {
            format!("'{s}': dp {dp:?} does not cover the input")
        })?;
    }
    Ok(format!(
        "7/7 hashtag fixtures; DP matches enumeration on {} strings of 1 to 12 chars",
        strings.len()
    ))
}

// ---------------------------------------------------------------- 4

fn hate_task() -> KeywordTask {
    KeywordTask::new(&[
        ("none", &["sunny", "lovely", "friends", "welcome"]),
        ("hate", &["vermin", "scum", "invaders", "parasites"]),
    ])
}

fn task_config(dir: &Path, name: &str, role: Role, task: &KeywordTask, n: usize, seed: u64) -> TaskConfig {
    let path = dir.join(format!("{name}.csv"));
    write_csv(&task.generate(n, seed, name), &path).unwrap();
    TaskConfig {
        name: name.into(),
        role,
        path,
        test: None,
        labels: None,
        weight: 1.0,
    }
}

fn desk_config(variant: u8, tasks: Vec<TaskConfig>) -> RunConfig {
    let mut c = RunConfig {
        variant,
        seed: 42,
        tasks,
        word_dim: 16,
        subword_dim: 16,
        subword_buckets: 500,
        char_len: 64,
        max_epochs: 30,
        ..RunConfig::default()
    };
    c.word.filters = 16;
    c.word.windows = vec![2, 3, 4];
    c.char.filters = 32;
    c.char.strides = [1, 2];
    c.char.hidden = 32;
    c.adam.lr = 1e-2;
    c
}

fn criterion_4() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let task = task_config(dir.path(), "K", Role::Hate, &hate_task(), 40, 4);
    let mut lines = Vec::new();
    for variant in 1..=5u8 {
        let start = Instant::now();
        let mut cfg = desk_config(variant, vec![task.clone()]);
        cfg.trainable_subwords = variant == 2;
        cfg.patience = 29;
        cfg.batch_size = 10;
        let prep = prepare(&cfg, &Resources::default(), None).map_err(err)?;
        let examples = &prep.tasks[0].train;
        let arch = cfg.model_spec(prep.net.seq_len, vec![]).architecture();
        let mut store = ParamStore::new();
        let model = build_single_task(arch, &prep.net, &prep.input, &prep.tasks[0].spec, &mut store, 1).map_err(err)?;
        let out = train_stl(
            &model,
            &mut store,
            0,
            TaskData {
                train: examples,
                val: &[],
            },
            &cfg.train_config(),
        )
        .map_err(err)?;
        let first = out
            .history
            .iter()
            .find(|r| r.split == "train" && r.accuracy >= 1.0)
            .map(|r| r.epoch);
        let cm = evaluate(&model, &store, 0, &prep.tasks[0].spec.labels, examples).map_err(err)?;
        let secs = start.elapsed().as_secs_f64();
        ensure(cm.trace() == cm.total(), || {
            format!("model {variant}: {}/{} correct after training", cm.trace(), cm.total())
        })?;
        ensure(first.is_some(), || {
            format!("model {variant}: never reached 100% in 30 epochs")
        })?;
        ensure(secs < 60.0, || format!("model {variant}: {secs:.1}s"))?;
        lines.push(format!("model {variant} epoch {} ({secs:.1}s)", first.unwrap()));
    }
    Ok(lines.join(", "))
}

// ---------------------------------------------------------------- 5

struct MtlFixture {
    _dir: tempfile::TempDir,
    cfg: RunConfig,
    prep: Prepared,
    tests: Vec<Vec<EncodedExample>>,
}

fn mtl_fixture() -> Result<MtlFixture, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    // one keyword pool; each task sees part of it and C only words A and B also use
    let kinds: [KeywordTask; 3] = [
        KeywordTask::new(&[
            ("none", &["sunny", "lovely", "friends"]),
            ("hate", &["vermin", "scum", "invaders"]),
        ]),
        KeywordTask::new(&[
            ("none", &["lovely", "friends", "welcome"]),
            ("hate", &["scum", "invaders", "parasites"]),
        ]),
        KeywordTask::new(&[("none", &["sunny", "welcome"]), ("hate", &["vermin", "parasites"])]),
    ];
    let sizes = [240, 160, 40];
    let names = ["A", "B", "C"];
    let mut tasks = Vec::new();
    for (i, (&n, name)) in sizes.iter().zip(names).enumerate() {
        let task = &kinds[i];
        let mut t = task_config(dir.path(), name, Role::Hate, task, n, 100 + i as u64);
        let test = dir.path().join(format!("{name}_test.csv"));
        write_csv(&task.generate(200, 200 + i as u64, "t"), &test).map_err(err)?;
        t.test = Some(test);
        tasks.push(t);
    }
    // random static vectors: no pretrained table at desk scale
    let mut cfg = desk_config(1, tasks);
    cfg.word.filters = 16;
    cfg.word.windows = vec![2, 3];
    cfg.word.hidden = vec![];
    let mut prep = prepare(&cfg, &Resources::default(), None).map_err(err)?;
    cfg.variant = 6;
    let tests = prep.tasks.iter_mut().map(|t| t.test.take().unwrap()).collect();
    Ok(MtlFixture {
        _dir: dir,
        cfg,
        prep,
        tests,
    })
}

fn accuracy(cm: &ConfusionMatrix) -> f64 {
    100.0 * cm.trace() as f64 / cm.total() as f64
}

fn head_accuracies(
    fx: &MtlFixture,
    sn: &mtltext::models::SharedNetwork,
    sn_store: &ParamStore,
    config: &TrainConfig,
) -> Result<Vec<f64>, String> {
    let mut acc = Vec::new();
    for (t, task) in fx.prep.tasks.iter().enumerate() {
        let mut h = derive_task_head(sn, sn_store, &fx.prep.input, &task.spec, 500 + t as u64).map_err(err)?;
        train_stl(
            &h.model,
            &mut h.store,
            0,
            TaskData {
                train: &task.train,
                val: &[],
            },
            config,
        )
        .map_err(err)?;
        let cm = evaluate(&h.model, &h.store, 0, &task.spec.labels, &fx.tests[t]).map_err(err)?;
        acc.push(accuracy(&cm));
    }
    Ok(acc)
}

fn criterion_5() -> Outcome {
    let fx = mtl_fixture()?;
    let specs: Vec<TaskSpec> = fx.prep.tasks.iter().map(|t| t.spec.clone()).collect();
    let config = fx.cfg.train_config();
    let data: Vec<TaskData> = fx
        .prep
        .tasks
        .iter()
        .map(|t| TaskData {
            train: &t.train,
            val: &[],
        })
        .collect();

    let mut trained = ParamStore::new();
    let sn = build_shared_network(&fx.prep.net, &fx.prep.input, &specs, &mut trained, 77).map_err(err)?;
    train_shared_network(&sn, &mut trained, &data, &config).map_err(err)?;
    let head_config = TrainConfig {
        batch_size: 8,
        ..config.clone()
    };
    let ours = head_accuracies(&fx, &sn, &trained, &head_config)?;

    let mut random_store = ParamStore::new();
    let control_sn = build_shared_network(&fx.prep.net, &fx.prep.input, &specs, &mut random_store, 77).map_err(err)?;
    let control = head_accuracies(&fx, &control_sn, &random_store, &head_config)?;

    let smallest = fx
        .prep
        .tasks
        .iter()
        .enumerate()
        .min_by_key(|(_, t)| t.train.len())
        .map(|(i, _)| i)
        .unwrap();
    let fmt = |v: &[f64]| v.iter().map(|a| format!("{a:.1}")).collect::<Vec<_>>().join("/");
    for (t, a) in ours.iter().enumerate() {
        ensure(*a >= 90.0, || {
            format!(
                "task {} held-out accuracy {a:.1}% < 90% (all {}, control {})",
                specs[t].name,
                fmt(&ours),
                fmt(&control)
            )
        })?;
    }
    let gap = ours[smallest] - control[smallest];
    ensure(gap >= 10.0, || {
        format!(
            "smallest task {}: {:.1}% vs random-backbone {:.1}% (gap {gap:.1} < 10)",
            specs[smallest].name, ours[smallest], control[smallest]
        )
    })?;
    Ok(format!(
        "held-out accuracy {} (A/B/C); random frozen backbone {}; smallest-task gap {gap:.1} points",
        fmt(&ours),
        fmt(&control)
    ))
}

// ---------------------------------------------------------------- 6

fn criterion_6() -> Outcome {
    let net = desk_net();
    let input = desk_input(false);
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let d1 = TaskSpec::new("D1", &["none", "hate"]);
    let d2 = TaskSpec::new("D2", &["none", "hate", "offensive"]);
    let d3 = TaskSpec::new("D3", &["none", "hate"]);
    let s = TaskSpec::new("S", &["negative", "neutral", "positive"]);
    for (variant, tasks) in [(9, vec![d1.clone(), d2, d3]), (10, vec![d1, s])] {
        let seeds: Vec<u64> = (0..tasks.len() as u64).map(|i| 900 + i).collect();
        let mut store = ParamStore::new();
        let ssn = build_soft_shared(&net, &input, &tasks, &mut store, &seeds).map_err(err)?;
        let levels = ssn.levels;
        let expected = cross_transform_count(tasks.len(), levels);
        let n = tasks.len();
        let distinct: BTreeSet<String> = ssn
            .transform_names()
            .iter()
            .map(|t| t.rsplit_once('.').map_or(t.clone(), |(m, _)| m.to_string()))
            .collect();
        ensure(distinct.len() == expected && expected == n * (n - 1) * levels, || {
            format!(
                "model {variant}: {} transforms, closed form {}",
                distinct.len(),
                n * (n - 1) * levels
            )
        })?;
        let singles: Vec<(Model, ParamStore)> = tasks
            .iter()
            .zip(&seeds)
            .map(|(t, &sd)| {
                let mut st = ParamStore::new();
                build_word_cnn(&net, &input, t, &mut st, sd).map(|m| (m, st))
            })
            .collect::<Result<_, _>>()
            .map_err(err)?;
        for e in 0..5 {
            let ex = desk_example(1000 + e, 0, 0);
            let joint = forward_all(&ssn.model, &store, &ex).map_err(err)?;
            for (t, (m, st)) in singles.iter().enumerate() {
                let alone = &forward_all(m, st, &ex).map_err(err)?[0];
                for (a, b) in joint[t].iter().zip(alone) {
                    worst = worst.max((a - b).abs());
                }
                checked += 1;
            }
        }
    }
    ensure(worst <= 1e-12, || format!("max difference {worst:e}"))?;
    Ok(format!(
        "{checked} subnet forwards identical to STL (max diff {worst:e}); transform counts match n(n-1)·levels"
    ))
}

// ---------------------------------------------------------------- 7

fn criterion_7() -> Outcome {
    let fx = mtl_fixture()?;
    let specs: Vec<TaskSpec> = fx.prep.tasks.iter().map(|t| t.spec.clone()).collect();
    let mut config = fx.cfg.train_config();
    config.max_epochs = 6;
    let data: Vec<TaskData> = fx
        .prep
        .tasks
        .iter()
        .map(|t| TaskData {
            train: &t.train,
            val: &[],
        })
        .collect();
    let mut sn_store = ParamStore::new();
    let sn = build_shared_network(&fx.prep.net, &fx.prep.input, &specs, &mut sn_store, 3).map_err(err)?;
    train_shared_network(&sn, &mut sn_store, &data, &config).map_err(err)?;
    let mut other_store = ParamStore::new();
    let other = build_shared_network(&fx.prep.net, &fx.prep.input, &specs[..2], &mut other_store, 4).map_err(err)?;
    let mut runs = 0;
    let mut tensors = 0;
    for (t, task) in fx.prep.tasks.iter().enumerate() {
        let mut h = derive_task_head(&sn, &sn_store, &fx.prep.input, &task.spec, t as u64).map_err(err)?;
        let mut c = build_concat_model(
            (&sn, &sn_store),
            (&other, &other_store),
            &fx.prep.input,
            &task.spec,
            t as u64,
        )
        .map_err(err)?;
        for (name, model, store) in [("head", &h.model, &mut h.store), ("concat", &c.model, &mut c.store)] {
            let before = store.frozen_digests();
            let params_before = store.snapshot();
            train_stl(
                model,
                store,
                0,
                TaskData {
                    train: &task.train,
                    val: &[],
                },
                &config,
            )
            .map_err(err)?;
            let after = store.frozen_digests();
            ensure(!before.is_empty(), || {
                format!("{name} {}: nothing frozen", task.spec.name)
            })?;
            ensure(before == after, || {
                format!("{name} {}: frozen tensors changed", task.spec.name)
            })?;
            ensure(store.snapshot() != params_before, || {
                format!("{name} {}: training changed nothing", task.spec.name)
            })?;
            tensors += before.len();
            runs += 1;
        }
    }
    Ok(format!(
        "{runs} fine-tuning runs, {tensors} frozen tensor hashes unchanged"
    ))
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let dir = tempfile::tempdir().map_err(err)?;
    let tasks = vec![
        task_config(dir.path(), "D1", Role::Hate, &hate_task(), 60, 1),
        task_config(dir.path(), "D2", Role::Hate, &hate_task(), 45, 2),
    ];
    let mut cfg = desk_config(6, tasks);
    cfg.max_epochs = 4;
    cfg.patience = 3;
    let mut bodies = Vec::new();
    for run in 0..2 {
        let prep = prepare(&cfg, &Resources::default(), None).map_err(err)?;
        let cv = cross_validate(&cfg, &prep).map_err(err)?;
        let out = dir.path().join(format!("run{run}"));
        std::fs::create_dir_all(&out).map_err(err)?;
        cv.report.emit(&out).map_err(err)?;
        let files: Vec<Vec<u8>> = ["report.json", "report.txt", "report.csv"]
            .iter()
            .map(|f| std::fs::read(out.join(f)))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        bodies.push(files);
    }
    ensure(bodies[0] == bodies[1], || "report files differ between runs".into())?;
    Ok(format!(
        "two 5-fold runs of model 6 gave byte-identical reports ({} bytes of JSON)",
        bodies[0][0].len()
    ))
}

// ---------------------------------------------------------------- 9

fn criterion_9() -> Outcome {
    let classes = vec!["hate".to_string(), "non-hate".to_string()];
    let mut labels = vec![0usize; 1097];
    labels.extend(std::iter::repeat_n(1, 8571));
    let plan = stratified_kfold(&labels, &classes, 5, 1).map_err(err)?;
    let mut minority = Vec::new();
    for f in 0..5 {
        let n = plan.test_indices(f).iter().filter(|&&i| labels[i] == 0).count();
        ensure(n == 219 || n == 220, || format!("fold {f}: {n} hate examples"))?;
        minority.push(n);
    }
    let mut rng = rng_for(9, "stratification");
    for case in 0..100 {
        let k = rng.gen_range(2..=10);
        let c = rng.gen_range(2..=5);
        let counts: Vec<usize> = (0..c).map(|_| rng.gen_range(k..=k * 30)).collect();
        let mut labels: Vec<usize> = counts
            .iter()
            .enumerate()
            .flat_map(|(cl, &n)| std::iter::repeat_n(cl, n))
            .collect();
        use rand::seq::SliceRandom;
        labels.shuffle(&mut rng);
        let names: Vec<String> = (0..c).map(|i| format!("c{i}")).collect();
        let plan = stratified_kfold(&labels, &names, k, case).map_err(err)?;
        let total = labels.len() as f64;
        for f in 0..k {
            let idx = plan.test_indices(f);
            let size = idx.len() as f64;
            for cl in 0..c {
                let p = idx.iter().filter(|&&i| labels[i] == cl).count() as f64 / size;
                let global = counts[cl] as f64 / total;
                ensure((p - global).abs() <= 1.0 / size + 1e-12, || {
                    format!("case {case}: fold {f} class {cl} proportion {p:.4} vs {global:.4}")
                })?;
            }
        }
    }
    Ok(format!(
        "D1 hate per fold {minority:?}; 100 random datasets within 1/fold-size"
    ))
}

// ---------------------------------------------------------------- 10

fn criterion_10() -> Outcome {
    let batch = 30;
    let mut checked = 0;
    for k in 2..=6 {
        let (base, r) = (batch / k, batch % k);
        let mut totals = vec![0; k];
        for b in 0..k * 4 {
            let shares = batch_shares(k, batch, b);
            let extra: BTreeSet<usize> = (0..r).map(|j| (b * r + j) % k).collect();
            let expected: Vec<usize> = (0..k).map(|t| base + usize::from(extra.contains(&t))).collect();
            ensure(shares == expected, || {
                format!("k={k} batch {b}: {shares:?}, expected {expected:?}")
            })?;
            for (t, s) in shares.iter().enumerate() {
                totals[t] += s;
            }
            checked += 1;
        }
        ensure(totals.iter().all(|&t| t == totals[0]), || {
            format!("k={k}: uneven totals over a cycle {totals:?}")
        })?;
    }
    Ok(format!("{checked} batches over k=2..6 follow the floor/remainder rule"))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient suite", criterion_1),
        ("metric oracle", criterion_2),
        ("preprocessing fixtures", criterion_3),
        ("overfit sanity", criterion_4),
        ("fs-mtl two-step", criterion_5),
        ("soft-sharing identity", criterion_6),
        ("freeze contract", criterion_7),
        ("determinism", criterion_8),
        ("stratification", criterion_9),
        ("equal-sample batching", criterion_10),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        if only.is_some_and(|o| o != i + 1) {
            continue;
        }
        let start = Instant::now();
        let result = std::panic::catch_unwind(run).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} PASS {name}: {detail} [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} FAIL {name}: {why} [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
