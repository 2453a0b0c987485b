use std::fmt::Write as _;
use std::path::Path;

use crate::clue::{ClueSet, ClueSubset, TextClue};
use crate::data::{corrupt_text, corrupt_video, ManifestRecord, MixtureExample, VIDEO_NOISE_DB};
use crate::dccrn::{extract, Checkpoint, ClueMode};
use crate::error::{Error, Result};
use crate::signal::{snr, AudioClip, StftPlan};

/// Which clues to degrade before extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Corruption {
    Text,
    Video,
    Both,
}

impl Corruption {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "text" => Ok(Corruption::Text),
            "video" => Ok(Corruption::Video),
            "both" => Ok(Corruption::Both),
            _ => Err(Error::Input(format!(
                "unknown corruption {s:?} (text, video or both)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Corruption::Text => "text",
            Corruption::Video => "video",
            Corruption::Both => "both",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CorruptionSpec {
    pub kind: Corruption,
    pub seed: u64,
}

impl CorruptionSpec {
    /// Degrades the present text and/or video clues. The per-example seed
    /// mixes the run seed with the example seed.
    pub fn apply(&self, clues: &ClueSet, example_seed: u64) -> Result<ClueSet> {
        let seed = self.seed ^ example_seed.rotate_left(17);
        let mut out = clues.clone();
        if matches!(self.kind, Corruption::Text | Corruption::Both) {
            out.text = match &clues.text {
                Some(TextClue::Tokens(t)) => Some(TextClue::Tokens(corrupt_text(t, seed)?)),
                Some(TextClue::Features(_)) => {
                    return Err(Error::Input("text corruption needs token clues".into()))
                }
                None => None,
            };
        }
        if matches!(self.kind, Corruption::Video | Corruption::Both) {
            out.video = clues
                .video
                .as_ref()
                .map(|v| corrupt_video(v, VIDEO_NOISE_DB, seed.wrapping_add(1)))
                .transpose()?;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalRow {
    pub id: String,
    pub subset: ClueSubset,
    pub snr_in: f64,
    pub snr_out: f64,
    pub snri: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsetSummary {
    pub subset: ClueSubset,
    pub count: usize,
    pub mean_snri: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub split: String,
    pub corruption: Option<Corruption>,
    pub rows: Vec<EvalRow>,
    /// One entry per requested subset, in request order.
    pub summary: Vec<SubsetSummary>,
}

impl EvalReport {
    pub fn mean(&self, subset: ClueSubset) -> Option<f64> {
        self.summary
            .iter()
            .find(|s| s.subset == subset)
            .map(|s| s.mean_snri)
    }

    /// Per-example rows followed by one `mean` row per subset.
    pub fn to_csv(&self) -> String {
        let corruption = self.corruption.map_or("none", Corruption::name);
        let mut out = String::from("split,corruption,subset,id,snr_in_db,snr_out_db,snri_db\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{corruption},{},{},{},{},{}",
                self.split, r.subset, r.id, r.snr_in, r.snr_out, r.snri
            );
        }
        for s in &self.summary {
            let rows: Vec<_> = self.rows.iter().filter(|r| r.subset == s.subset).collect();
            let mean = |f: fn(&EvalRow) -> f64| {
                rows.iter().map(|r| f(r)).sum::<f64>() / rows.len().max(1) as f64
            };
            let _ = writeln!(
                out,
                "{},{corruption},{},mean,{},{},{}",
                self.split,
                s.subset,
                mean(|r| r.snr_in),
                mean(|r| r.snr_out),
                s.mean_snri
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores `extractor` on every record for every subset. The extractor sees
/// the mixture and the (possibly corrupted) restricted clue set.
pub fn evaluate_with(
    records: &[&ManifestRecord],
    split: &str,
    subsets: &[ClueSubset],
    corruption: Option<CorruptionSpec>,
    extractor: &dyn Fn(&AudioClip, &ClueSet) -> Result<AudioClip>,
) -> Result<EvalReport> {
    if subsets.is_empty() || subsets.iter().any(ClueSubset::is_empty) {
        return Err(Error::Input(
            "evaluation needs non-empty clue subsets".into(),
        ));
    }
    let mut rows = Vec::new();
    for r in records {
        let ex: MixtureExample = r.example()?;
        let clues = match corruption {
            Some(c) => c.apply(&ex.clues, ex.seed)?,
            None => ex.clues.clone(),
        };
        let snr_in = snr(&ex.target, &ex.mixture)?;
        for &subset in subsets {
            let estimate = extractor(&ex.mixture, &clues.restrict(subset)?)?;
            let snr_out = snr(&ex.target, &estimate)?;
            rows.push(EvalRow {
                id: r.id.clone(),
                subset,
                snr_in,
                snr_out,
                snri: snr_out - snr_in,
            });
        }
    }
    let summary = subsets
        .iter()
        .map(|&subset| {
            let v: Vec<f64> = rows
                .iter()
                .filter(|r| r.subset == subset)
                .map(|r| r.snri)
                .collect();
            SubsetSummary {
                subset,
                count: v.len(),
                mean_snri: if v.is_empty() {
                    f64::NAN
                } else {
                    v.iter().sum::<f64>() / v.len() as f64
                },
            }
        })
        .collect();
    Ok(EvalReport {
        split: split.to_string(),
        corruption: corruption.map(|c| c.kind),
        rows,
        summary,
    })
}

/// Scores a checkpoint. Stage-1 checkpoints only accept the tag clue.
pub fn evaluate(
    records: &[&ManifestRecord],
    split: &str,
    ckpt: &Checkpoint,
    subsets: &[ClueSubset],
    corruption: Option<CorruptionSpec>,
) -> Result<EvalReport> {
    let (model, store) = ckpt.instantiate::<f32>()?;
    let plan = StftPlan::new(ckpt.config.stft)?;
    let mode = model.default_mode();
    if mode == ClueMode::Tag {
        if let Some(s) = subsets.iter().find(|s| **s != ClueSubset::TAG) {
            return Err(Error::Contract(format!(
                "a stage-1 checkpoint only uses the tag clue; cannot score subset {s}"
            )));
        }
    }
    evaluate_with(records, split, subsets, corruption, &|mix, clues| {
        Ok(model.extract(&store, &plan, mix, clues, mode)?.audio)
    })
}

/// Head-averaged attention of the fused clue path as CSV: a header of
/// segment labels, then one row per downsampled sound frame.
pub fn attention_csv(mixture: &AudioClip, clues: &ClueSet, ckpt: &Checkpoint) -> Result<String> {
    if ckpt.stage < 2 {
        return Err(Error::Contract(
            "a stage-1 checkpoint has no clue attention".into(),
        ));
    }
    let out = extract(mixture, clues, ckpt)?;
    let (Some(w), Some(segments)) = (out.attention, out.segments) else {
        return Err(Error::Contract(
            "extraction produced no attention weights".into(),
        ));
    };
    let (h, ta, u) = match w.shape() {
        &[h, ta, u] => (h, ta, u),
        s => return Err(Error::dim("attention", s, &[0, 0, 0])),
    };
    let labels = segments.labels();
    if labels.len() != u {
        return Err(Error::dim("attention columns", &[labels.len()], &[u]));
    }
    let mut csv = labels.join(",");
    csv.push('\n');
    let data = w.data();
    for t in 0..ta {
        let row: Vec<String> = (0..u)
            .map(|j| {
                let mean = (0..h).map(|k| data[(k * ta + t) * u + j]).sum::<f64>() / h as f64;
                mean.to_string()
            })
            .collect();
        csv.push_str(&row.join(","));
        csv.push('\n');
    }
    Ok(csv)
}
