//! End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
//! exits nonzero if any fails.
//!
//! `MIAUDIT_ACCEPTANCE=1,4` restricts the run to the listed criteria.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::rc::Rc;
use std::time::{Duration, Instant};

use miaudit::attacks::{lira_score, AttackScoreRecord, GaussianPair};
use miaudit::data::{gen_synthetic, CanaryFamily};
use miaudit::defenses::{
    hamp_mask, train_dpsgd_audited, train_relaxloss_audited, train_selena, DefenseConfig,
    DpSgdConfig, RelaxLossConfig, SelenaConfig,
};
use miaudit::eval::protocol::fleet_accuracy;
use miaudit::eval::report::{population_report, sample_level_report, ReportMeta, SampleMode};
use miaudit::eval::{
    audit_fleet, name_and_shame_sim, prepare, roc_curve, tpr_at_fpr, train_fleet, AttackId,
    AuditRun, ExperimentSpec, PreparedAudit, RocPoint,
};
use miaudit::model::Model;
use miaudit::parallel::Exec;
use miaudit::rng::rng_from;
use rand::Rng;
use rand_distr::{Distribution, Normal as Gauss};
use serde_json::{json, Value};
use statrs::distribution::{ContinuousCDF, Normal};

const ALPHA: f64 = 0.01;

type Check = Result<String, String>;

fn ensure(ok: bool, detail: String) -> Check {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn within(limit: Duration, start: Instant) -> Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    if start.elapsed() < limit {
        Ok(secs)
    } else {
        Err(format!("took {secs:.1}s, limit {}s", limit.as_secs()))
    }
}

// ---------------------------------------------------------------- fleets

struct Fleet {
    spec: ExperimentSpec,
    prepared: PreparedAudit,
    models: Vec<Model>,
    accuracy: f64,
}

impl Fleet {
    fn audit(&self, attack: AttackId) -> AuditRun {
        let s = &self.spec;
        audit_fleet(
            &self.prepared,
            &self.models,
            attack,
            &s.attack_params,
            &s.fpr_targets,
            s.seed,
            Exec::Parallel,
        )
        .unwrap()
    }

    /// Pooled TPR at `ALPHA` over the evaluated records: sample-level over
    /// canaries, population-level when there are none.
    fn tpr(&self, attack: AttackId) -> f64 {
        let run = self.audit(attack);
        let meta = ReportMeta {
            canary_family: self.prepared.family,
            ..ReportMeta::default()
        };
        let report = if self.prepared.family == CanaryFamily::None {
            population_report(&run.records, &[ALPHA], meta)
        } else {
            sample_level_report(&run.records, SampleMode::PooledCanaries, &[ALPHA], meta)
        }
        .unwrap();
        report.at(ALPHA).unwrap().tpr
    }

    /// Strongest of the listed attacks, with the winner's id.
    fn best(&self, attacks: &[AttackId]) -> (f64, AttackId) {
        attacks
            .iter()
            .map(|&a| (self.tpr(a), a))
            .fold((f64::NEG_INFINITY, attacks[0]), |b, c| {
                if c.0 > b.0 {
                    c
                } else {
                    b
                }
            })
    }
}

#[derive(Default)]
struct Fleets {
    cache: HashMap<String, Rc<Fleet>>,
}

impl Fleets {
    fn get(&mut self, name: &str) -> Rc<Fleet> {
        if let Some(f) = self.cache.get(name) {
            return f.clone();
        }
        let spec: ExperimentSpec = serde_json::from_value(fleet_spec(name)).unwrap();
        let t = Instant::now();
        let prepared = prepare(&spec).unwrap();
        let models = train_fleet(
            &prepared.dataset,
            &prepared.membership,
            &spec.defense,
            spec.seed,
            Exec::Parallel,
        )
        .unwrap();
        let accuracy = fleet_accuracy(&models, &prepared.holdout, Exec::Parallel).unwrap();
        println!(
            "  trained fleet {name}: S={} accuracy {accuracy:.4} in {:.1?}",
            spec.num_models,
            t.elapsed()
        );
        let f = Rc::new(Fleet {
            spec,
            prepared,
            models,
            accuracy,
        });
        self.cache.insert(name.to_string(), f.clone());
        f
    }
}

fn train_cfg(epochs: usize) -> Value {
    json!({"epochs": epochs, "batch_size": 32, "learning_rate": 0.05, "momentum": 0.9})
}

fn dataset(dim: usize, per_class: usize, audit: usize) -> Value {
    json!({"num_classes": 4, "dim": dim, "per_class": per_class, "separation": 6.0,
           "tail_fraction": 0.05, "audit_count": audit, "seed": 0})
}

/// The comparison fleets share data, optimizer and architecture; only the
/// defense mechanism differs.
fn defense_json(id: &str) -> Value {
    let train = train_cfg(30);
    let model = json!({"arch": "mlp", "hidden": 64});
    match id {
        "undefended" => json!({"id": id, "train": train, "model": model}),
        "dp-sgd" => {
            json!({"id": id, "train": train, "clip_norm": 1.0, "noise_multiplier": 0.5, "model": model})
        }
        "relaxloss" => json!({"id": id, "train": train, "loss_threshold": 0.1, "model": model}),
        "hamp" => json!({"id": id, "train": train, "entropy_smoothing": 0.2, "model": model}),
        "selena" => {
            json!({"id": id, "train": train, "num_teachers": 6, "queries": 3,
                   "distill_epochs": 30, "model": model})
        }
        _ => unreachable!("{id}"),
    }
}

fn fleet_spec(name: &str) -> Value {
    let (family, rest) = name.split_once('/').unwrap();
    let canaries = json!({"family": family});
    match rest {
        "contrastive" => json!({
            "dataset": dataset(32, 100, 200),
            "canaries": canaries,
            "defense": {"id": "contrastive", "encoder": train_cfg(200), "head": train_cfg(20),
                        "embedding_dim": 16, "hidden": 64, "temperature": 0.5,
                        "augmentation": {"noise_std": 0.3, "flip_prob": 0.5}},
            "attack": "contrastive-white",
            "num_models": 32,
            "seed": 1
        }),
        "selena-wide" => json!({
            "dataset": dataset(64, 500, 500),
            "canaries": canaries,
            "defense": {"id": "selena", "train": train_cfg(60), "num_teachers": 8, "queries": 2,
                        "distill_epochs": 60, "model": {"arch": "mlp", "hidden": 128}},
            "attack": "lira",
            "num_models": 64,
            "seed": 1
        }),
        defense => json!({
            "dataset": dataset(8, 1500, 500),
            "canaries": canaries,
            "defense": defense_json(defense),
            "attack": "lira",
            "num_models": 64,
            "seed": 1
        }),
    }
}

fn lira_and_label_only() -> Vec<AttackId> {
    let mut v = AttackId::LIRA_VARIANTS.to_vec();
    v.push(AttackId::LabelOnly);
    v
}

// ---------------------------------------------------------------- criteria

fn name_and_shame() -> Check {
    let t = Instant::now();
    let (size, target) = (1000, 0);
    let alphas = [0.0, 0.001, 0.01, 0.1];
    let r = name_and_shame_sim(size, target, 20_000, 0, &alphas).map_err(|e| e.to_string())?;
    let secs = within(Duration::from_secs(10), t)?;
    let positives = r.population.num_positives as f64;
    let mut parts = Vec::new();
    let mut ok = true;
    for (a, entry) in alphas.iter().zip(&r.population.tpr_at) {
        let p = a + 1.0 / size as f64;
        let bound = p + 3.0 * (p * (1.0 - p) / positives).sqrt();
        ok &= entry.tpr <= bound;
        parts.push(format!("tpr@{a}={:.5}<={bound:.5}", entry.tpr));
    }
    let target_tpr = r
        .sample_level
        .per_sample
        .iter()
        .find(|s| s.audit_index == target)
        .map(|s| s.tpr[0]);
    ok &= target_tpr == Some(1.0);
    ensure(
        ok,
        format!(
            "{}; target tpr@0={target_tpr:?}; {secs:.1}s",
            parts.join(" ")
        ),
    )
}

fn analytic_tpr(alpha: f64) -> f64 {
    let n = Normal::new(0.0, 1.0).unwrap();
    1.0 - n.cdf(n.inverse_cdf(1.0 - alpha) - 1.0)
}

fn lira_oracle() -> Check {
    let t = Instant::now();
    let pair = GaussianPair::new(1.0, 1.0, 0.0, 1.0).map_err(|e| e.to_string())?;
    let mut rng = rng_from(2024);
    let (inside, outside) = (Gauss::new(1.0, 1.0).unwrap(), Gauss::new(0.0, 1.0).unwrap());
    let records: Vec<AttackScoreRecord> = (0..10_000)
        .map(|i| {
            let member = i % 2 == 0;
            let s = if member {
                inside.sample(&mut rng)
            } else {
                outside.sample(&mut rng)
            };
            AttackScoreRecord {
                victim_index: i,
                audit_index: 0,
                attack_score: lira_score(s, &pair),
                is_member: member,
            }
        })
        .collect();
    let curve = roc_curve(&records).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for k in 1..=20 {
        let alpha = k as f64 / 20.0 - 0.025;
        worst = worst.max((tpr_at_fpr(&curve, alpha).unwrap() - analytic_tpr(alpha)).abs());
    }
    let secs = within(Duration::from_secs(5), t)?;
    ensure(
        worst <= 0.03,
        format!("max |tpr - analytic| = {worst:.4} over 20 points; {secs:.2}s"),
    )
}

fn sweep(pairs: &[(f64, bool)]) -> Vec<RocPoint> {
    let pos = pairs.iter().filter(|p| p.1).count();
    let neg = pairs.len() - pos;
    let mut thresholds: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    thresholds.sort_by(|a, b| b.total_cmp(a));
    thresholds.dedup();
    std::iter::once(f64::INFINITY)
        .chain(thresholds)
        .map(|t| {
            let tp = pairs.iter().filter(|p| p.1 && p.0 >= t).count();
            let fp = pairs.iter().filter(|p| !p.1 && p.0 >= t).count();
            RocPoint {
                threshold: t,
                tpr: tp as f64 / pos as f64,
                fpr: fp as f64 / neg as f64,
            }
        })
        .collect()
}

fn roc_brute_force() -> Check {
    let t = Instant::now();
    let mut rng = rng_from(3);
    let mut checked = 0;
    while checked < 1000 {
        let n = rng.random_range(2..=200);
        // Coarse scores force ties.
        let pairs: Vec<(f64, bool)> = (0..n)
            .map(|_| {
                (
                    f64::from(rng.random_range(-20i32..20)) / 4.0,
                    rng.random_bool(0.5),
                )
            })
            .collect();
        if pairs.iter().all(|p| p.1) || pairs.iter().all(|p| !p.1) {
            continue;
        }
        let records: Vec<AttackScoreRecord> = pairs
            .iter()
            .enumerate()
            .map(|(i, &(s, m))| AttackScoreRecord {
                victim_index: i,
                audit_index: 0,
                attack_score: s,
                is_member: m,
            })
            .collect();
        let curve = roc_curve(&records).map_err(|e| e.to_string())?;
        let oracle = sweep(&pairs);
        if curve.points != oracle {
            return Err(format!("curve mismatch on set {checked} (n={n})"));
        }
        let mut alphas = vec![0.0, 0.001, 0.01, 0.1, 0.5, 1.0];
        alphas.extend((0..10).map(|_| rng.random::<f64>()));
        alphas.extend(oracle.iter().map(|p| p.fpr));
        for a in alphas {
            let want = oracle
                .iter()
                .filter(|p| p.fpr <= a)
                .map(|p| p.tpr)
                .fold(0.0, f64::max);
            if tpr_at_fpr(&curve, a).unwrap() != want {
                return Err(format!("tpr_at_fpr mismatch on set {checked} at alpha {a}"));
            }
        }
        checked += 1;
    }
    let secs = within(Duration::from_secs(10), t)?;
    ensure(true, format!("{checked} record sets exact; {secs:.1}s"))
}

fn gap(fleets: &mut Fleets) -> Check {
    let t = Instant::now();
    let canary = fleets.get("mislabeled/undefended").tpr(AttackId::Lira);
    let clean = fleets.get("none/undefended").tpr(AttackId::Lira);
    let secs = within(Duration::from_secs(15 * 60), t)?;
    let ratio = canary / clean;
    ensure(
        ratio >= 3.0,
        format!("sample-level canary tpr {canary:.4} / population tpr {clean:.4} = {ratio:.2}; {secs:.0}s"),
    )
}

fn defense_ordering(fleets: &mut Fleets) -> Check {
    let t = Instant::now();
    let attacks = lira_and_label_only();
    let mut rows = BTreeMap::new();
    for d in ["undefended", "relaxloss", "selena", "hamp", "dp-sgd"] {
        let f = fleets.get(&format!("mislabeled/{d}"));
        let (tpr, winner) = f.best(&attacks);
        rows.insert(d, (tpr, winner, f.accuracy));
    }
    let secs = within(Duration::from_secs(3600), t)?;
    let accs: Vec<f64> = rows.values().map(|r| r.2).collect();
    let spread = accs.iter().cloned().fold(f64::NEG_INFINITY, f64::max)
        - accs.iter().cloned().fold(f64::INFINITY, f64::min);
    let dp = rows["dp-sgd"].0;
    let lowest = rows
        .iter()
        .filter(|(d, _)| **d != "dp-sgd")
        .all(|(_, r)| dp < r.0);
    let detail: Vec<String> = rows
        .iter()
        .map(|(d, (tpr, w, acc))| format!("{d} {tpr:.4} ({w}, acc {acc:.4})"))
        .collect();
    ensure(
        lowest && spread <= 0.02,
        format!(
            "{}; accuracy spread {spread:.4}; {secs:.0}s",
            detail.join(", ")
        ),
    )
}

fn selena_duplicates(fleets: &mut Fleets) -> Check {
    let variants = AttackId::LIRA_VARIANTS;
    let (dup, dup_with) = fleets
        .get("mislabeled-duplicate/selena-wide")
        .best(&variants);
    let (iso, iso_with) = fleets.get("mislabeled/selena-wide").best(&variants);
    let ok = dup >= 2.0 * iso && (0.35..=0.65).contains(&dup);
    ensure(ok, format!("duplicate {dup:.4} ({dup_with}) vs isolated {iso:.4} ({iso_with}); plateau window [0.35, 0.65]"))
}

fn label_only_vs_masking(fleets: &mut Fleets) -> Check {
    let f = fleets.get("mislabeled/hamp");
    let label = f.tpr(AttackId::LabelOnly);
    let (lira, with) = f.best(&AttackId::LIRA_VARIANTS);
    ensure(
        label >= 1.5 * lira,
        format!("label-only {label:.4} vs best LiRA {lira:.4} ({with})"),
    )
}

fn contrastive(fleets: &mut Fleets) -> Check {
    let mislabeled = fleets.get("mislabeled/contrastive");
    let white = mislabeled.tpr(AttackId::ContrastiveWhite);
    let black = mislabeled.tpr(AttackId::ContrastiveBlack);
    let clean = fleets.get("none/contrastive");
    let (a, b) = (
        mislabeled.audit(AttackId::ContrastiveWhite),
        clean.audit(AttackId::ContrastiveWhite),
    );
    let bytes = |run: &AuditRun| {
        run.scores
            .values()
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect::<Vec<u8>>()
    };
    let same_scores = bytes(&a) == bytes(&b);
    let same_roc = roc_curve(&a.records).unwrap() == roc_curve(&b.records).unwrap();
    ensure(
        white >= black && same_scores && same_roc,
        format!("white {white:.4} vs black {black:.4}; encoder scores byte-equal {same_scores}, ROC equal {same_roc}"),
    )
}

fn mechanism_invariants() -> Check {
    let ds = gen_synthetic(&serde_json::from_value(dataset(8, 1500, 500)).unwrap())
        .map_err(|e| e.to_string())?;
    let train = &ds.fixed;
    let defense = |id: &str| -> DefenseConfig { serde_json::from_value(defense_json(id)).unwrap() };
    let mut parts = Vec::new();
    let mut ok = true;

    let DefenseConfig::DpSgd(dp) = defense("dp-sgd") else {
        unreachable!()
    };
    for cfg in [
        dp.clone(),
        DpSgdConfig {
            clip_norm: 0.01,
            ..dp
        },
    ] {
        let (mut events, mut clipped, mut violations) = (0usize, 0usize, 0usize);
        train_dpsgd_audited(train, 4, &cfg, &mut |e| {
            events += 1;
            clipped += usize::from(e.raw_norm > cfg.clip_norm);
            violations += usize::from(!(e.clipped_norm <= cfg.clip_norm));
        })
        .map_err(|e| e.to_string())?;
        ok &= violations == 0 && clipped > 0;
        parts.push(format!(
            "dp-sgd C={}: {violations} of {events} over bound ({clipped} clipped)",
            cfg.clip_norm
        ));
    }

    let DefenseConfig::Relaxloss(rl) = defense("relaxloss") else {
        unreachable!()
    };
    for cfg in [
        rl.clone(),
        RelaxLossConfig {
            loss_threshold: 2.0 * 4f64.ln(),
            ..rl
        },
    ] {
        let (mut triggered, mut bad) = (0usize, 0usize);
        train_relaxloss_audited(train, 4, &cfg, &mut |s| {
            if s.triggered {
                triggered += 1;
                bad += usize::from(!(s.ascent_alignment >= 0.0));
            }
        })
        .map_err(|e| e.to_string())?;
        ok &= bad == 0 && triggered > 0;
        parts.push(format!(
            "relaxloss threshold {:.3}: {bad} of {triggered} triggered steps misaligned",
            cfg.loss_threshold
        ));
    }

    let DefenseConfig::Selena(sc) = defense("selena") else {
        unreachable!()
    };
    let sc = SelenaConfig {
        train: sc.train.with_seed(5),
        ..sc
    };
    let Model::Selena(m) = train_selena(train, 4, &sc).map_err(|e| e.to_string())? else {
        unreachable!()
    };
    let ids: BTreeSet<u64> = train.iter().map(|e| e.id).collect();
    let keys: BTreeSet<u64> = m.exclusions.keys().copied().collect();
    let well_formed = m.exclusions.values().all(|ex| {
        ex.len() == sc.queries
            && ex.windows(2).all(|w| w[0] < w[1])
            && ex.iter().all(|&t| t < sc.num_teachers)
    });
    let total = ids == keys && well_formed;
    ok &= total;
    parts.push(format!(
        "selena exclusions total over {} examples: {total}",
        ids.len()
    ));

    let mut rng = rng_from(9);
    let mut broken = 0;
    for i in 0..10_000u64 {
        let k = rng.random_range(2..=10);
        let raw: Vec<f64> = (0..k).map(|_| -rng.random::<f64>().ln()).collect();
        let sum: f64 = raw.iter().sum();
        let probs: Vec<f64> = raw.iter().map(|r| r / sum).collect();
        let masked = hamp_mask(&probs, i).map_err(|e| e.to_string())?;
        let order = |v: &[f64]| {
            let mut idx: Vec<usize> = (0..v.len()).collect();
            idx.sort_by(|&a, &b| v[b].total_cmp(&v[a]));
            idx
        };
        broken += usize::from(order(&probs) != order(&masked));
    }
    ok &= broken == 0;
    parts.push(format!("hamp_mask: {broken} of 10000 rankings changed"));
    ensure(ok, parts.join("; "))
}

fn determinism() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut configs = Vec::new();
    for (name, defense, attack) in [
        ("lira", defense_json("undefended"), "lira"),
        ("label-only", defense_json("hamp"), "label-only"),
    ] {
        let mut spec = fleet_spec("mislabeled/undefended");
        spec["defense"] = defense;
        spec["defense"]["train"]["epochs"] = json!(5);
        spec["dataset"] = dataset(8, 100, 60);
        spec["attack"] = json!(attack);
        spec["num_models"] = json!(8);
        spec["holdout_per_class"] = json!(50);
        let path = tmp.path().join(format!("{name}.json"));
        std::fs::write(&path, serde_json::to_vec_pretty(&spec).unwrap()).unwrap();
        configs.push((name, path));
    }
    let mut compared = 0;
    for (name, cfg) in &configs {
        let mut outs = Vec::new();
        for threads in ["1", "8"] {
            let out = tmp.path().join(format!("{name}-t{threads}"));
            let status = Command::new(env!("CARGO_BIN_EXE_miaudit"))
                .args(["--threads", threads, "run", "--config"])
                .arg(cfg)
                .arg("--out")
                .arg(&out)
                .env_remove("MIAUDIT_CACHE")
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(String::from_utf8_lossy(&status.stderr).into_owned());
            }
            outs.push(out);
        }
        for file in [
            "config.json",
            "scores.miat",
            "scores.json",
            "reports.json",
            "roc.csv",
        ] {
            let read = |d: &Path| std::fs::read(d.join(file)).unwrap();
            if read(&outs[0]) != read(&outs[1]) {
                return Err(format!("{name}: {file} differs between --threads 1 and 8"));
            }
            compared += 1;
        }
    }
    ensure(
        true,
        format!("{compared} artifacts byte-identical across --threads 1 and 8"),
    )
}

fn main() {
    let only: Option<BTreeSet<usize>> = std::env::var("MIAUDIT_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|s| s.trim().parse().ok()).collect());
    let mut fleets = Fleets::default();
    let criteria: Vec<(usize, &str, Box<dyn FnOnce(&mut Fleets) -> Check>)> = vec![
        (
            1,
            "name-and-shame bound and target leak",
            Box::new(|_| name_and_shame()),
        ),
        (2, "LiRA analytic oracle", Box::new(|_| lira_oracle())),
        (
            3,
            "ROC brute-force equivalence",
            Box::new(|_| roc_brute_force()),
        ),
        (4, "sample-level vs population gap", Box::new(gap)),
        (
            5,
            "DP-SGD lowest canary leakage",
            Box::new(defense_ordering),
        ),
        (6, "SELENA duplicate leakage", Box::new(selena_duplicates)),
        (
            7,
            "label-only beats LiRA under masking",
            Box::new(label_only_vs_masking),
        ),
        (
            8,
            "contrastive white-box vs black-box",
            Box::new(contrastive),
        ),
        (
            9,
            "mechanism invariants",
            Box::new(|_| mechanism_invariants()),
        ),
        (10, "thread-count determinism", Box::new(|_| determinism())),
    ];
    let mut failed = 0;
    for (n, name, check) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| check(&mut fleets))).unwrap_or_else(|p| {
            Err(format!(
                "panicked: {:?}",
                p.downcast_ref::<String>()
                    .map(String::as_str)
                    .or(p.downcast_ref::<&str>().copied())
            ))
        });
        let (verdict, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!(
            "criterion {n} ({name}): {verdict} [{:.1?}] {detail}",
            t.elapsed()
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
