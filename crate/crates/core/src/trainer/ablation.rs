//! Grid runner over guidance placement, relation variant, layer selection and
//! alignment variant, with seeds averaged per cell.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use super::config::{parse_pairs, TrainConfig};
use super::train_codec;
use crate::corpus::Corpus;
use crate::error::{Error, Result};
use crate::evalkit::{self, EvalReport};

/// Keys that may carry comma-separated value lists in a grid file.
pub const AXES: [&str; 4] = ["modulation.mode", "rela.variant", "rela.layer_select", "align.variant"];

#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    /// Single-valued overrides applied to every cell.
    pub base: Vec<(String, String)>,
    /// Axis key with its values, in [`AXES`] order.
    pub axes: Vec<(String, Vec<String>)>,
    /// Seeds per cell; `None` keeps the base config's `seeds`.
    pub seeds: Option<Vec<u64>>,
}

impl GridSpec {
    /// Parses `key=value` lines; axis keys may list several comma-separated values.
    pub fn parse(text: &str) -> Result<Self> {
        let mut base = Vec::new();
        let mut axes: Vec<(String, Vec<String>)> = Vec::new();
        let mut seeds = None;
        for (k, v) in parse_pairs(text)? {
            let values: Vec<String> = v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect();
            if k == "seeds" {
                let parsed = values
                    .iter()
                    .map(|s| s.parse::<u64>().map_err(|_| Error::Config(format!("seeds: bad seed `{s}`"))))
                    .collect::<Result<Vec<_>>>()?;
                if parsed.is_empty() {
                    return Err(Error::Config("seeds must list at least one seed".into()));
                }
                seeds = Some(parsed);
            } else if AXES.contains(&k.as_str()) {
                if values.is_empty() {
                    return Err(Error::Config(format!("{k}: empty value list")));
                }
                if axes.iter().any(|(a, _)| *a == k) {
                    return Err(Error::Config(format!("{k} listed twice")));
                }
                axes.push((k, values));
            } else {
                base.push((k, v));
            }
        }
        axes.sort_by_key(|(k, _)| AXES.iter().position(|a| a == k));
        Ok(Self { base, axes, seeds })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    /// Every combination of axis values, in row-major order.
    pub fn cells(&self) -> Vec<Vec<(String, String)>> {
        let mut cells = vec![Vec::new()];
        for (k, values) in &self.axes {
            cells = cells
                .into_iter()
                .flat_map(|c| {
                    values.iter().map(move |v| {
                        let mut c = c.clone();
                        c.push((k.clone(), v.clone()));
                        c
                    })
                })
                .collect();
        }
        cells
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub seed: u64,
    pub config_hash: u64,
    pub report: Option<EvalReport>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellResult {
    pub settings: Vec<(String, String)>,
    /// Hash of the cell config with seeds excluded.
    pub cell_hash: u64,
    pub runs: Vec<RunResult>,
    pub emo_proxy: Option<f64>,
    pub probe_r2: Option<f64>,
    pub lsd: Option<f64>,
    pub mel: Option<f64>,
}

impl CellResult {
    pub fn failed(&self) -> usize {
        self.runs.iter().filter(|r| r.report.is_none()).count()
    }

    pub fn setting(&self, key: &str) -> Option<&str> {
        self.settings.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn summarize(&mut self) {
        let ok: Vec<&EvalReport> = self.runs.iter().filter_map(|r| r.report.as_ref()).collect();
        let mean = |f: &dyn Fn(&EvalReport) -> Option<f64>| {
            let v: Vec<f64> = ok.iter().filter_map(|r| f(r)).collect();
            (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
        };
        self.emo_proxy = mean(&|r| Some(r.emo_proxy));
        self.probe_r2 = mean(&|r| r.probe_mean());
        self.lsd = mean(&|r| Some(r.lsd));
        self.mel = mean(&|r| Some(r.mel));
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationResult {
    pub cells: Vec<CellResult>,
}

impl AblationResult {
    pub fn runs(&self) -> usize {
        self.cells.iter().map(|c| c.runs.len()).sum()
    }

    /// Cells ordered by emotion-proxy similarity, best first; failed cells last.
    pub fn ranked(&self) -> Vec<&CellResult> {
        let mut v: Vec<&CellResult> = self.cells.iter().collect();
        v.sort_by(|a, b| {
            let key = |c: &CellResult| c.emo_proxy.unwrap_or(f64::NEG_INFINITY);
            key(b).total_cmp(&key(a))
        });
        v
    }

    pub fn text_table(&self) -> String {
        let cols = ["Attention", "Relation", "Layers", "Align"];
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<44} | {:^29} | {:^10} | {:^10} |",
            "", "Emotion Consistency", "Content", "Naturalness"
        );
        let _ = writeln!(
            s,
            "{:<14}{:<10}{:<8}{:<12} | {:>15} {:>13} | {:>10} | {:>10} | {:>6}",
            cols[0], cols[1], cols[2], cols[3], "Emo SIM (proxy)", "Probe R2", "LSD", "Mel dist", "Runs"
        );
        let _ = writeln!(s, "{}", "-".repeat(110));
        let f = |v: Option<f64>| v.map(|x| format!("{x:.4}")).unwrap_or_else(|| "failed".into());
        for c in self.ranked() {
            let ok = c.runs.len() - c.failed();
            let _ = writeln!(
                s,
                "{:<14}{:<10}{:<8}{:<12} | {:>15} {:>13} | {:>10} | {:>10} | {:>3}/{:<2}",
                c.setting("modulation.mode").unwrap_or("base"),
                c.setting("rela.variant").unwrap_or("base"),
                c.setting("rela.layer_select").unwrap_or("base"),
                c.setting("align.variant").unwrap_or("base"),
                f(c.emo_proxy),
                c.probe_r2.map(|x| format!("{x:.4}")).unwrap_or_else(|| "-".into()),
                f(c.lsd),
                f(c.mel),
                ok,
                c.runs.len()
            );
        }
        s
    }

    pub fn csv(&self) -> String {
        let mut s = String::from("rank,modulation.mode,rela.variant,rela.layer_select,align.variant,emo_sim_proxy,probe_r2,lsd,mel_dist,runs_ok,runs,cell_hash\n");
        let o = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for (i, c) in self.ranked().into_iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{:016x}",
                i + 1,
                c.setting("modulation.mode").unwrap_or(""),
                c.setting("rela.variant").unwrap_or(""),
                c.setting("rela.layer_select").unwrap_or(""),
                c.setting("align.variant").unwrap_or(""),
                o(c.emo_proxy),
                o(c.probe_r2),
                o(c.lsd),
                o(c.mel),
                c.runs.len() - c.failed(),
                c.runs.len(),
                c.cell_hash
            );
        }
        s
    }

    /// Writes `ablation.csv`, `ablation.txt` and `runs.json` under `dest`.
    pub fn write(&self, dest: &Path) -> Result<()> {
        fs::create_dir_all(dest)?;
        fs::write(dest.join("ablation.csv"), self.csv())?;
        fs::write(dest.join("ablation.txt"), self.text_table())?;
        fs::write(dest.join("runs.json"), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

/// Trains and evaluates one configuration.
pub fn run_one(cfg: &TrainConfig, corpus: &Corpus, eval: &Corpus) -> Result<EvalReport> {
    let out = train_codec(cfg, corpus, |_| {})?;
    let model = &out.trainer.model;
    let mut report = evalkit::eval_reconstruction(model, eval)?;
    if eval.len() >= 2 {
        report.probe_r2 = Some(evalkit::probe_emotion(model, eval)?);
    }
    Ok(report)
}

/// Runs every cell × seed. A failing run is recorded and the grid continues.
/// `eval` defaults to the training corpus; `on_run` sees each finished run.
pub fn run_ablation(
    grid: &GridSpec,
    base: &TrainConfig,
    corpus: &Corpus,
    eval: Option<&Corpus>,
    mut on_run: impl FnMut(&[(String, String)], &RunResult),
) -> Result<AblationResult> {
    let mut base = base.clone();
    base.apply(&grid.base)?;
    let seeds = grid.seeds.clone().unwrap_or_else(|| base.seeds.clone());
    let eval = eval.unwrap_or(corpus);
    let mut cells = Vec::new();
    for settings in grid.cells() {
        let mut cell_cfg = base.clone();
        let applied = cell_cfg.apply(&settings);
        let mut cell = CellResult {
            settings: settings.clone(),
            cell_hash: cell_cfg.hash_without_seed(),
            runs: Vec::new(),
            emo_proxy: None,
            probe_r2: None,
            lsd: None,
            mel: None,
        };
        for &seed in &seeds {
            let mut cfg = cell_cfg.clone();
            cfg.seed = seed;
            let outcome = match &applied {
                Err(e) => Err(Error::Config(e.to_string())),
                Ok(()) => run_one(&cfg, corpus, eval),
            };
            let run = RunResult {
                seed,
                config_hash: cfg.hash(),
                error: outcome.as_ref().err().map(|e| e.to_string()),
                report: outcome.ok().map(|mut r| {
                    r.label = format!("seed{seed}");
                    r.audio.clear();
                    r
                }),
            };
            on_run(&settings, &run);
            cell.runs.push(run);
        }
        cell.summarize();
        cells.push(cell);
    }
    Ok(AblationResult { cells })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::tests::tiny_cfg;

    fn setup(steps: usize) -> (TrainConfig, Corpus) {
        let mut cfg = tiny_cfg();
        cfg.steps = steps;
        let c = cfg.corpus.load(cfg.teachers).unwrap();
        (cfg, c)
    }

    #[test]
    fn parses_axes_and_base() {
        let g = GridSpec::parse("align.variant=full,sem-only\nmodulation.mode = none, cross-before\nseeds=4,5\nloss.rela=0.5\n").unwrap();
        assert_eq!(g.axes[0].0, "modulation.mode");
        assert_eq!(g.cells().len(), 4);
        assert_eq!(g.seeds, Some(vec![4, 5]));
        assert_eq!(g.base, vec![("loss.rela".to_string(), "0.5".to_string())]);
        assert!(GridSpec::parse("seeds=x").is_err());
        assert!(GridSpec::parse("align.variant=full\nalign.variant=sem-only").is_err());
    }

    #[test]
    fn single_cell_equals_plain_training() {
        let (cfg, c) = setup(2);
        let g = GridSpec::parse("modulation.mode=cross-before\nseeds=0").unwrap();
        let r = run_ablation(&g, &cfg, &c, None, |_, _| {}).unwrap();
        assert_eq!(r.runs(), 1);
        let mut plain_cfg = cfg.clone();
        plain_cfg.seed = 0;
        plain_cfg.modulation.mode = "cross-before".parse().unwrap();
        let plain = run_one(&plain_cfg, &c, &c).unwrap();
        let grid = r.cells[0].runs[0].report.as_ref().unwrap();
        assert_eq!(grid.mel.to_bits(), plain.mel.to_bits());
        assert_eq!(grid.emo_proxy.to_bits(), plain.emo_proxy.to_bits());
        assert_eq!(r.cells[0].runs[0].config_hash, plain_cfg.hash());
    }

    #[test]
    fn eight_cells_three_seeds() {
        let (cfg, c) = setup(1);
        let g = GridSpec::parse(
            "modulation.mode=none,cross-before\nrela.variant=full,emo-only\nalign.variant=full,uniform-scaled\nseeds=0,1,2",
        )
        .unwrap();
        let mut seen = 0;
        let r = run_ablation(&g, &cfg, &c, None, |_, _| seen += 1).unwrap();
        assert_eq!(seen, 24);
        assert_eq!(r.runs(), 24);
        assert_eq!(r.cells.len(), 8);
        let table = r.text_table();
        assert_eq!(table.lines().count(), 3 + 8);
        assert_eq!(r.csv().lines().count(), 1 + 8);
        for cell in &r.cells {
            let hashes: Vec<u64> = cell.runs.iter().map(|x| x.config_hash).collect();
            assert!(hashes[0] != hashes[1] && hashes[1] != hashes[2]);
            for run in &cell.runs {
                let mut cfg2 = cfg.clone();
                cfg2.apply(&cell.settings).unwrap();
                cfg2.seed = run.seed;
                assert_eq!(cfg2.hash_without_seed(), cell.cell_hash);
            }
        }
        let ranked = r.ranked();
        assert!(ranked.windows(2).all(|w| w[0].emo_proxy >= w[1].emo_proxy));
    }

    #[test]
    fn failing_cells_are_marked() {
        let (cfg, c) = setup(1);
        let g = GridSpec::parse("rela.variant=full,bogus\nseeds=0").unwrap();
        let r = run_ablation(&g, &cfg, &c, None, |_, _| {}).unwrap();
        assert_eq!(r.cells.len(), 2);
        assert_eq!(r.cells[0].failed(), 0);
        assert_eq!(r.cells[1].failed(), 1);
        assert!(r.text_table().contains("failed"));
    }
}
