//! Pipeline stages. Each reads its inputs from the output directory, writes
//! its artifacts there and leaves a run record under `records/`.
//!
//! Layout of the output directory:
//!
//! ```text
//! fixture/                  generated corpora, manifest, n-best lists
//! ingest.json
//! similarity.{csv,json}
//! grouping.json  grouping_report.{json,txt}
//! groups/group-<i>/         sample.tsv plan.json vocab.bpe coverage.json
//!                           model.lglm train_log.jsonl train_state.json
//! targets/<locale>/         mono.* ft.* mask.json mft.*
//! eval.{json,txt}  rescore.{json,txt}  cost.{json,txt}
//! records/<stage>.json
//! ```

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use locale_forge::bpe::{learn_bpe, BpeVocab, Coverage};
use locale_forge::corpus::{balance_plan, draw_sample, CorpusManifest, LocaleCorpus, LocaleId, SamplerConfig};
use locale_forge::langsim::{cluster_locales, grouping_report, similarity_matrix, LocaleGrouping};
use locale_forge::lm::{
    build_locale_mask, build_model, encode_sequences, fine_tune, load_checkpoint, masked_fine_tune, perplexity,
    save_checkpoint, train, LogRecord, RangeEntry, TrainHyper, TrainOutcome, TransformerLm,
};
use locale_forge::rescore::{
    attach_references, evaluate_locale, hosting_cost, parse_nbest, parse_references, score_all,
    tune_weights_with_scores, DeploymentPlan, LocaleEval, NBestList, NnlmScorer, RescoreWeights, SentenceScorer,
    WerrTable,
};
use serde::{Deserialize, Serialize};

use crate::config::{NBestFiles, PipelineConfig};
use crate::fixture::gen_fixture;
use crate::seeds::derive_seed;
use crate::{CliError, Result};

/// Stage names in `run-all` order.
pub const STAGES: [&str; 12] = [
    "gen-fixture",
    "ingest",
    "similarity",
    "cluster",
    "sample",
    "bpe-learn",
    "train",
    "finetune",
    "mft",
    "eval",
    "rescore",
    "cost-model",
];

pub const SYSTEMS: [&str; 4] = ["Mono", "Multi", "Multi+FT", "Multi+MFT"];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub config_hash: String,
    pub master_seed: u64,
    pub stage_seed: u64,
    pub versions: BTreeMap<String, String>,
    pub wall_seconds: f64,
    /// Paths relative to the output directory.
    pub outputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocaleIngest {
    pub sentences: usize,
    pub word_types: usize,
    pub train: usize,
    pub valid: usize,
}

/// Training curves without the optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateSummary {
    pub step: u64,
    pub eval_steps: Vec<u64>,
    pub valid_loss: BTreeMap<LocaleId, Vec<f64>>,
    pub group_curve: Vec<f64>,
    pub best_step: u64,
    pub best_group_loss: f64,
    pub stopped_early: bool,
    pub convergence_range: BTreeMap<LocaleId, RangeEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetEval {
    pub group: usize,
    pub valid_sentences: usize,
    /// Validation perplexity per system; systems not trained are absent.
    pub perplexity: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub targets: BTreeMap<LocaleId, TargetEval>,
    /// Per group, every member's loss at the group-best step against its own best.
    pub convergence: Vec<BTreeMap<LocaleId, RangeEntry>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescoreDetail {
    pub system: String,
    pub locale: LocaleId,
    pub dev_utterances: usize,
    pub weights: RescoreWeights,
    pub eval: LocaleEval,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RescoreReport {
    pub table: WerrTable,
    pub details: Vec<RescoreDetail>,
}

pub struct Pipeline {
    cfg: PipelineConfig,
    out: PathBuf,
    seed: u64,
    hash: String,
}

fn rel(out: &Path, p: &Path) -> String {
    p.strip_prefix(out).unwrap_or(p).display().to_string()
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    serde_json::from_str(&read_text(path)?).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn log_lines(log: &[LogRecord]) -> String {
    log.iter()
        .map(|r| serde_json::to_string(r).expect("log serializes") + "\n")
        .collect()
}

fn summarize(o: &TrainOutcome) -> StateSummary {
    let s = &o.state;
    StateSummary {
        step: s.step,
        eval_steps: s.eval_steps.clone(),
        valid_loss: s.valid_loss.clone(),
        group_curve: s.group_curve(),
        best_step: s.best_step,
        best_group_loss: s.best_group_loss,
        stopped_early: s.stopped_early,
        convergence_range: s.convergence_range(),
    }
}

/// Collects files written by one stage.
struct Outputs<'a> {
    out: &'a Path,
    files: Vec<PathBuf>,
}

impl Outputs<'_> {
    fn text(&mut self, path: PathBuf, text: &str) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        self.files.push(path);
        Ok(())
    }

    fn json<T: Serialize>(&mut self, path: PathBuf, value: &T) -> Result<()> {
        self.text(path, &(serde_json::to_string_pretty(value).expect("report serializes") + "\n"))
    }

    fn model(&mut self, path: PathBuf, o: &TrainOutcome) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent).map_err(|e| CliError::io(parent, e))?;
        }
        save_checkpoint(&o.best, Some(&o.state), &path)?;
        self.files.push(path);
        Ok(())
    }

    fn relative(&self) -> Vec<String> {
        self.files.iter().map(|p| rel(self.out, p)).collect()
    }
}

impl Pipeline {
    pub fn new(cfg: PipelineConfig) -> Result<Self> {
        cfg.validate()?;
        let out = cfg.out_dir.clone().expect("validated");
        std::fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        Ok(Self {
            seed: cfg.seed.expect("validated"),
            hash: cfg.hash(),
            cfg,
            out,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn config_hash(&self) -> &str {
        &self.hash
    }

    pub fn stage_seed(&self, name: &str) -> u64 {
        derive_seed(self.seed, name)
    }

    pub fn group_dir(&self, i: usize) -> PathBuf {
        self.out.join("groups").join(format!("group-{i}"))
    }

    pub fn target_dir(&self, t: &LocaleId) -> PathBuf {
        self.out.join("targets").join(t.as_str())
    }

    fn stage<T>(&self, name: &str, f: impl FnOnce(&mut Outputs) -> Result<T>) -> Result<T> {
        log::info!("stage {name}: start");
        let t0 = Instant::now();
        let mut outputs = Outputs {
            out: &self.out,
            files: Vec::new(),
        };
        let value = f(&mut outputs).map_err(|e| e.in_stage(name))?;
        let record = RunRecord {
            stage: name.to_string(),
            config_hash: self.hash.clone(),
            master_seed: self.seed,
            stage_seed: self.stage_seed(name),
            versions: BTreeMap::from([
                ("locale-forge-cli".to_string(), env!("CARGO_PKG_VERSION").to_string()),
                ("locale-forge-core".to_string(), locale_forge::VERSION.to_string()),
            ]),
            wall_seconds: t0.elapsed().as_secs_f64(),
            outputs: outputs.relative(),
        };
        let path = self.out.join("records").join(format!("{name}.json"));
        Outputs {
            out: &self.out,
            files: Vec::new(),
        }
        .json(path, &record)
        .map_err(|e| e.in_stage(name))?;
        log::info!("stage {name}: done in {:.1}s", record.wall_seconds);
        Ok(value)
    }

    fn manifest_path(&self) -> PathBuf {
        match &self.cfg.manifest {
            Some(m) => m.clone(),
            None => self.out.join("fixture").join("manifest.json"),
        }
    }

    fn corpora(&self) -> Result<Vec<LocaleCorpus>> {
        let path = self.manifest_path();
        if self.cfg.fixture.is_some() && !path.is_file() {
            return Err(CliError::Data("fixture not generated yet; run gen-fixture first".into()));
        }
        Ok(CorpusManifest::load(&path)?.ingest_all()?)
    }

    /// `(train, valid)` per locale: the last `valid_sentences` are held out.
    fn splits(&self) -> Result<BTreeMap<LocaleId, (LocaleCorpus, LocaleCorpus)>> {
        let n = self.cfg.valid_sentences;
        self.corpora()?
            .into_iter()
            .map(|c| {
                if c.n_sentences() <= n {
                    return Err(CliError::Data(format!(
                        "{} has {} sentences, need more than valid_sentences = {n}",
                        c.locale(),
                        c.n_sentences()
                    )));
                }
                Ok((c.locale().clone(), c.split_tail(n)))
            })
            .collect()
    }

    pub fn grouping(&self) -> Result<LocaleGrouping> {
        read_json(&self.out.join("grouping.json"))
    }

    fn group_of(&self, g: &LocaleGrouping, t: &LocaleId) -> Result<usize> {
        g.group_of(t)
            .ok_or_else(|| CliError::Data(format!("locale {t} is not in any group")))
    }

    pub fn load_vocab(&self, group: usize) -> Result<BpeVocab> {
        Ok(BpeVocab::from_file_str(&read_text(&self.group_dir(group).join("vocab.bpe"))?)?)
    }

    pub fn load_model(&self, path: &Path) -> Result<TransformerLm> {
        Ok(load_checkpoint(path)?.model)
    }

    fn read_sample(&self, group: usize) -> Result<Vec<(LocaleId, String)>> {
        let path = self.group_dir(group).join("sample.tsv");
        read_text(&path)?
            .lines()
            .enumerate()
            .map(|(i, line)| {
                let (loc, text) = line
                    .split_once('\t')
                    .ok_or_else(|| CliError::Data(format!("{}:{}: expected two columns", path.display(), i + 1)))?;
                Ok((loc.parse()?, text.to_string()))
            })
            .collect()
    }

    /// A stream of `total_draws` sentences drawn uniformly from one locale.
    fn locale_stream(&self, vocab: &BpeVocab, corpus: &LocaleCorpus, seed_name: &str) -> Result<Vec<Vec<u32>>> {
        let cfg = SamplerConfig {
            alpha: 1.0,
            total_draws: self.cfg.sampler.total_draws,
            seed: self.stage_seed(seed_name),
        };
        let plan = balance_plan(std::slice::from_ref(corpus), &cfg)?;
        let drawn: Vec<String> = draw_sample(std::slice::from_ref(corpus), &plan, &cfg)?
            .into_iter()
            .map(|(_, s)| s)
            .collect();
        Ok(encode_sequences(vocab, &drawn))
    }

    fn hyper(&self, base: &TrainHyper, seed_name: &str) -> TrainHyper {
        TrainHyper {
            seed: self.stage_seed(seed_name),
            ..base.clone()
        }
    }

    pub fn gen_fixture(&self) -> Result<()> {
        let Some(spec) = &self.cfg.fixture else {
            return Err(CliError::config(vec!["fixture: section missing".into()]));
        };
        self.stage("gen-fixture", |o| {
            let dir = self.out.join("fixture");
            let f = gen_fixture(spec, self.stage_seed("gen-fixture"), &dir)?;
            o.files.push(f.manifest.clone());
            o.files.extend(f.corpora.values().cloned());
            for (n, r) in f.nbest.values() {
                o.files.extend([n.clone(), r.clone()]);
            }
            o.files.push(dir.join("families.json"));
            Ok(())
        })
    }

    pub fn ingest(&self) -> Result<BTreeMap<LocaleId, LocaleIngest>> {
        self.stage("ingest", |o| {
            let n = self.cfg.valid_sentences;
            let report: BTreeMap<LocaleId, LocaleIngest> = self
                .corpora()?
                .iter()
                .map(|c| {
                    let valid = n.min(c.n_sentences());
                    let entry = LocaleIngest {
                        sentences: c.n_sentences(),
                        word_types: c.word_types().len(),
                        train: c.n_sentences() - valid,
                        valid,
                    };
                    (c.locale().clone(), entry)
                })
                .collect();
            o.json(self.out.join("ingest.json"), &report)?;
            Ok(report)
        })
    }

    pub fn similarity(&self) -> Result<()> {
        self.stage("similarity", |o| {
            let m = similarity_matrix(&self.corpora()?, self.cfg.similarity.top_k)?;
            o.text(self.out.join("similarity.csv"), &m.to_csv())?;
            o.json(self.out.join("similarity.json"), &m)
        })
    }

    pub fn cluster(&self) -> Result<LocaleGrouping> {
        self.stage("cluster", |o| {
            let m = read_json(&self.out.join("similarity.json"))?;
            let params = self.cfg.clustering.params().expect("validated");
            let g = cluster_locales(&m, params)?;
            let report = grouping_report(&g, &m)?;
            o.json(self.out.join("grouping.json"), &g)?;
            o.json(self.out.join("grouping_report.json"), &report)?;
            o.text(self.out.join("grouping_report.txt"), &report.to_table())?;
            Ok(g)
        })
    }

    pub fn sample(&self) -> Result<()> {
        self.stage("sample", |o| {
            let g = self.grouping()?;
            let mut splits = self.splits()?;
            for (i, members) in g.groups.iter().enumerate() {
                let train: Vec<LocaleCorpus> = members
                    .iter()
                    .map(|l| splits.remove(l).map(|(t, _)| t))
                    .collect::<Option<_>>()
                    .ok_or_else(|| CliError::Data(format!("group {i} names a locale missing from the manifest")))?;
                let cfg = SamplerConfig {
                    alpha: self.cfg.sampler.alpha,
                    total_draws: self.cfg.sampler.total_draws,
                    seed: self.stage_seed(&format!("sample/group-{i}")),
                };
                let plan = balance_plan(&train, &cfg)?;
                let mut tsv = String::new();
                for (loc, s) in draw_sample(&train, &plan, &cfg)? {
                    writeln!(tsv, "{loc}\t{s}").unwrap();
                }
                o.text(self.group_dir(i).join("sample.tsv"), &tsv)?;
                o.json(self.group_dir(i).join("plan.json"), &plan)?;
            }
            Ok(())
        })
    }

    pub fn bpe_learn(&self) -> Result<()> {
        self.stage("bpe-learn", |o| {
            let g = self.grouping()?;
            let splits = self.splits()?;
            for (i, members) in g.groups.iter().enumerate() {
                let mut by_locale: BTreeMap<LocaleId, Vec<String>> = BTreeMap::new();
                for (loc, s) in self.read_sample(i)? {
                    by_locale.entry(loc).or_default().push(s);
                }
                let sample: Vec<LocaleCorpus> = by_locale
                    .into_iter()
                    .map(|(l, lines)| LocaleCorpus::from_lines(l, lines))
                    .collect();
                let vocab = learn_bpe(&sample, self.cfg.bpe.vocab_size)?;
                let coverage: BTreeMap<&LocaleId, Coverage> = members
                    .iter()
                    .filter_map(|l| splits.get(l).map(|(t, _)| (l, t)))
                    .map(|(l, t)| vocab.coverage(t).map(|c| (l, c)))
                    .collect::<std::result::Result<_, _>>()?;
                o.text(self.group_dir(i).join("vocab.bpe"), &vocab.to_file_string())?;
                o.json(self.group_dir(i).join("coverage.json"), &coverage)?;
            }
            Ok(())
        })
    }

    /// Encodes each line of `input` with a group's vocabulary, writing
    /// space-separated subword tokens.
    pub fn bpe_apply(&self, group: usize, input: &Path, output: &Path) -> Result<()> {
        self.stage("bpe-apply", |o| {
            let vocab = self.load_vocab(group)?;
            let mut text = String::new();
            for line in read_text(input)?.lines() {
                let t = vocab.encode_sentence(&locale_forge::corpus::normalize_text(line));
                writeln!(text, "{}", t.tokens.join(" ")).unwrap();
            }
            o.text(output.to_path_buf(), &text)
        })
    }

    /// Trains one model per group, plus a scratch monolingual model per
    /// target with the group's vocabulary and the pretraining plus
    /// fine-tuning step budget.
    pub fn train(&self) -> Result<()> {
        self.stage("train", |o| {
            let g = self.grouping()?;
            let splits = self.splits()?;
            for (i, members) in g.groups.iter().enumerate() {
                let vocab = self.load_vocab(i)?;
                let cfg = self.cfg.model.with_vocab(vocab.id_count());
                let stream: Vec<String> = self.read_sample(i)?.into_iter().map(|(_, s)| s).collect();
                let stream = encode_sequences(&vocab, &stream);
                let valid: BTreeMap<LocaleId, Vec<Vec<u32>>> = members
                    .iter()
                    .map(|l| (l.clone(), encode_sequences(&vocab, splits[l].1.sentences())))
                    .collect();
                let name = format!("train/group-{i}");
                log::info!("{name}: {} params, {} steps", cfg.param_count(), self.cfg.train.steps);
                let model = build_model(cfg, self.stage_seed(&format!("{name}/init")))?;
                let outcome = train(model, &stream, &valid, &self.hyper(&self.cfg.train, &name))?;
                let dir = self.group_dir(i);
                o.model(dir.join("model.lglm"), &outcome)?;
                o.text(dir.join("train_log.jsonl"), &log_lines(&outcome.log))?;
                o.json(dir.join("train_state.json"), &summarize(&outcome))?;
            }
            for t in &self.cfg.targets {
                let i = self.group_of(&g, t)?;
                let vocab = self.load_vocab(i)?;
                let (train_c, valid_c) = &splits[t];
                let name = format!("train/mono-{t}");
                let stream = self.locale_stream(&vocab, train_c, &format!("{name}/sample"))?;
                let valid = BTreeMap::from([(t.clone(), encode_sequences(&vocab, valid_c.sentences()))]);
                let hyper = TrainHyper {
                    steps: self.cfg.train.steps + self.cfg.finetune.steps,
                    patience: None,
                    ..self.hyper(&self.cfg.train, &name)
                };
                let model = build_model(self.cfg.model.with_vocab(vocab.id_count()), self.stage_seed(&format!("{name}/init")))?;
                let outcome = train(model, &stream, &valid, &hyper)?;
                let dir = self.target_dir(t);
                o.model(dir.join("mono.lglm"), &outcome)?;
                o.text(dir.join("mono_log.jsonl"), &log_lines(&outcome.log))?;
                o.json(dir.join("mono_state.json"), &summarize(&outcome))?;
            }
            Ok(())
        })
    }

    /// Shared inputs of general and masked fine-tuning for one target, so
    /// the two differ only in the mask.
    fn ft_inputs(
        &self,
        g: &LocaleGrouping,
        t: &LocaleId,
        splits: &BTreeMap<LocaleId, (LocaleCorpus, LocaleCorpus)>,
    ) -> Result<(usize, BpeVocab, TransformerLm, Vec<Vec<u32>>, Vec<Vec<u32>>, TrainHyper)> {
        let i = self.group_of(g, t)?;
        let vocab = self.load_vocab(i)?;
        let model = self.load_model(&self.group_dir(i).join("model.lglm"))?;
        let (train_c, valid_c) = splits
            .get(t)
            .ok_or_else(|| CliError::Data(format!("target {t} is not in the manifest")))?;
        let name = format!("finetune/{t}");
        let stream = self.locale_stream(&vocab, train_c, &format!("{name}/sample"))?;
        let valid = encode_sequences(&vocab, valid_c.sentences());
        Ok((i, vocab, model, stream, valid, self.hyper(&self.cfg.finetune, &name)))
    }

    pub fn finetune(&self) -> Result<()> {
        self.stage("finetune", |o| {
            let g = self.grouping()?;
            let splits = self.splits()?;
            for t in &self.cfg.targets {
                let (_, _, model, stream, valid, hyper) = self.ft_inputs(&g, t, &splits)?;
                let outcome = fine_tune(model, &stream, (t, &valid), &hyper)?;
                let dir = self.target_dir(t);
                o.model(dir.join("ft.lglm"), &outcome)?;
                o.text(dir.join("ft_log.jsonl"), &log_lines(&outcome.log))?;
                o.json(dir.join("ft_state.json"), &summarize(&outcome))?;
            }
            Ok(())
        })
    }

    /// Masked fine-tuning; the mask covers the target's whole corpus, so
    /// held-out text never hits a clamped logit.
    pub fn mft(&self) -> Result<()> {
        self.stage("mft", |o| {
            let g = self.grouping()?;
            let splits = self.splits()?;
            let full: BTreeMap<LocaleId, LocaleCorpus> =
                self.corpora()?.into_iter().map(|c| (c.locale().clone(), c)).collect();
            for t in &self.cfg.targets {
                let (_, vocab, model, stream, valid, hyper) = self.ft_inputs(&g, t, &splits)?;
                let mask = build_locale_mask(&vocab, &full[t])?;
                let dir = self.target_dir(t);
                o.json(
                    dir.join("mask.json"),
                    &serde_json::json!({
                        "locale": t,
                        "vocab_size": vocab.id_count(),
                        "present": mask.count,
                        "masked_ids": mask.masked_ids(),
                    }),
                )?;
                let outcome = masked_fine_tune(model, &stream, (t, &valid), &mask, &hyper)?;
                o.model(dir.join("mft.lglm"), &outcome)?;
                o.text(dir.join("mft_log.jsonl"), &log_lines(&outcome.log))?;
                o.json(dir.join("mft_state.json"), &summarize(&outcome))?;
            }
            Ok(())
        })
    }

    /// Checkpoints available for a target, by system name.
    fn system_models(&self, g: &LocaleGrouping, t: &LocaleId) -> Result<Vec<(&'static str, PathBuf)>> {
        let i = self.group_of(g, t)?;
        let dir = self.target_dir(t);
        let candidates = [
            (SYSTEMS[0], dir.join("mono.lglm")),
            (SYSTEMS[1], self.group_dir(i).join("model.lglm")),
            (SYSTEMS[2], dir.join("ft.lglm")),
            (SYSTEMS[3], dir.join("mft.lglm")),
        ];
        Ok(candidates.into_iter().filter(|(_, p)| p.is_file()).collect())
    }

    pub fn eval(&self) -> Result<EvalReport> {
        self.stage("eval", |o| {
            let g = self.grouping()?;
            let splits = self.splits()?;
            let mut targets = BTreeMap::new();
            let mut locales: Vec<&LocaleId> = self.cfg.targets.iter().collect();
            if locales.is_empty() {
                locales = splits.keys().collect();
            }
            for t in locales {
                let i = self.group_of(&g, t)?;
                let vocab = self.load_vocab(i)?;
                let valid = encode_sequences(&vocab, splits[t].1.sentences());
                let mut ppl = BTreeMap::new();
                for (system, path) in self.system_models(&g, t)? {
                    ppl.insert(system.to_string(), perplexity(&self.load_model(&path)?, &valid)?);
                }
                targets.insert(
                    t.clone(),
                    TargetEval {
                        group: i,
                        valid_sentences: valid.len(),
                        perplexity: ppl,
                    },
                );
            }
            let convergence = (0..g.groups.len())
                .map(|i| {
                    read_json::<StateSummary>(&self.group_dir(i).join("train_state.json")).map(|s| s.convergence_range)
                })
                .collect::<Result<Vec<_>>>()?;
            let report = EvalReport { targets, convergence };
            o.json(self.out.join("eval.json"), &report)?;
            o.text(self.out.join("eval.txt"), &eval_table(&report))?;
            Ok(report)
        })
    }

    fn nbest_inputs(&self) -> BTreeMap<LocaleId, NBestFiles> {
        let mut inputs = self.cfg.rescore.nbest.clone();
        if let Some(f) = &self.cfg.fixture {
            let dir = self.out.join("fixture").join("nbest");
            for l in &f.nbest_locales {
                inputs.entry(l.clone()).or_insert_with(|| NBestFiles {
                    nbest: dir.join(format!("{l}.nbest.tsv")),
                    refs: dir.join(format!("{l}.ref.tsv")),
                });
            }
        }
        inputs
    }

    /// Tunes weights on the leading dev share of each locale's lists and
    /// reports WERR against the first-pass 1-best on the rest.
    pub fn rescore(&self) -> Result<RescoreReport> {
        self.stage("rescore", |o| {
            let g = self.grouping()?;
            let inputs = self.nbest_inputs();
            if inputs.is_empty() {
                return Err(CliError::Data("no n-best inputs configured".into()));
            }
            let mut evals: BTreeMap<&str, Vec<LocaleEval>> = BTreeMap::new();
            let mut details = Vec::new();
            for (loc, files) in &inputs {
                let mut lists = parse_nbest(&files.nbest)?;
                attach_references(&mut lists, &parse_references(&files.refs)?)?;
                if lists.len() < 2 {
                    return Err(CliError::Data(format!("{loc}: need at least two utterances to split dev/test")));
                }
                let n_dev = ((lists.len() as f64 * self.cfg.rescore.dev_fraction).round() as usize).clamp(1, lists.len() - 1);
                let (dev, test) = lists.split_at(n_dev);
                let vocab = self.load_vocab(self.group_of(&g, loc)?)?;
                for (system, path) in self.system_models(&g, loc)? {
                    let model = self.load_model(&path)?;
                    let scorer = NnlmScorer {
                        model: &model,
                        vocab: &vocab,
                        batch_size: self.cfg.rescore.batch_size,
                    };
                    let weights = tune_weights_with_scores(dev, &score_all(dev, &scorer)?, &self.cfg.rescore.grid)?;
                    let eval = self.evaluate(loc, test, &scorer, &weights)?;
                    evals.entry(system).or_default().push(eval.clone());
                    details.push(RescoreDetail {
                        system: system.to_string(),
                        locale: loc.clone(),
                        dev_utterances: dev.len(),
                        weights,
                        eval,
                    });
                }
            }
            let mut table = WerrTable::new(inputs.keys().cloned().collect());
            for system in SYSTEMS {
                if let Some(e) = evals.get(system) {
                    table.add_system(system, e);
                }
            }
            let report = RescoreReport { table, details };
            o.json(self.out.join("rescore.json"), &report)?;
            o.text(self.out.join("rescore.txt"), &report.table.to_text())?;
            Ok(report)
        })
    }

    fn evaluate(&self, loc: &LocaleId, test: &[NBestList], scorer: &NnlmScorer, w: &RescoreWeights) -> Result<LocaleEval> {
        let scores = score_all(test, scorer)?;
        let oov: Vec<bool> = test
            .iter()
            .map(|l| l.hyps.iter().any(|h| scorer.has_oov(&h.text)))
            .collect();
        Ok(evaluate_locale(loc, test, &scores, w, &oov)?)
    }

    /// Resident memory of the three deployment strategies at the group
    /// checkpoint footprint.
    pub fn cost_model(&self) -> Result<()> {
        self.stage("cost-model", |o| {
            let g = self.grouping()?;
            let mut footprint = 0u64;
            for i in 0..g.groups.len() {
                let p = self.group_dir(i).join("model.lglm");
                let len = std::fs::metadata(&p).map_err(|e| CliError::io(&p, e))?.len();
                footprint = footprint.max(len);
            }
            let locales: Vec<LocaleId> = g.groups.iter().flatten().cloned().collect();
            let c = self.cfg.hosting.clusters;
            let report = hosting_cost(&[
                DeploymentPlan::monolingual(&locales, footprint, c),
                DeploymentPlan::group(&g.groups, footprint, c),
                DeploymentPlan::all(&locales, footprint, c),
            ])?;
            o.json(self.out.join("cost.json"), &report)?;
            o.text(self.out.join("cost.txt"), &report.to_text())
        })
    }

    pub fn run_all(&self) -> Result<()> {
        if self.cfg.fixture.is_some() {
            self.gen_fixture()?;
        }
        self.ingest()?;
        self.similarity()?;
        self.cluster()?;
        self.sample()?;
        self.bpe_learn()?;
        self.train()?;
        self.finetune()?;
        self.mft()?;
        self.eval()?;
        if !self.nbest_inputs().is_empty() {
            self.rescore()?;
        }
        self.cost_model()
    }
}

pub fn eval_table(r: &EvalReport) -> String {
    let mut s = format!("{:<10}", "locale");
    for sys in SYSTEMS {
        write!(s, " {sys:>10}").unwrap();
    }
    s.push('\n');
    for (loc, t) in &r.targets {
        write!(s, "{:<10}", loc.as_str()).unwrap();
        for sys in SYSTEMS {
            match t.perplexity.get(sys) {
                Some(p) => write!(s, " {p:>10.3}").unwrap(),
                None => write!(s, " {:>10}", "-").unwrap(),
            }
        }
        s.push('\n');
    }
    for (i, g) in r.convergence.iter().enumerate() {
        writeln!(s, "\ngroup-{i} convergence range").unwrap();
        for (loc, e) in g {
            writeln!(
                s,
                "{:<10} at_best {:.4} own_best {:.4} excess {:+.2}%",
                loc.as_str(),
                e.at_group_best,
                e.own_best,
                100.0 * e.excess
            )
            .unwrap();
        }
    }
    s
}
