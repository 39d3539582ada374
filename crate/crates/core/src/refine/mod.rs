//! Three-stage caption refinement.
//!
//! 1. A captioner re-annotates every record (`T^g`).
//! 2. Text–audio similarity filters the generated captions (`S > ρ₁`) and
//!    the original captions (`S > ρ₂`).
//! 3. Records whose captions both survive are compared text-to-text: close
//!    pairs keep the generated caption, distant pairs are merged by a
//!    language model under a fixed prompt (`S < ρ₃`).
//!
//! Records that already carry a provenance are left untouched, so reruns
//! over a finished manifest are no-ops.

mod clients;
mod record;

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

pub use clients::{
    bounded_map, Cached, Captioner, ClientConfig, ClientMode, DiskCache, Fixtures, Fuser,
    FusionEntry, HttpClient, MockClient, Scorer, TextAudioEntry, TextTextEntry,
};
pub use record::{CaptionRecord, Flag, Provenance};

use crate::error::{Error, Result};

/// `Merge this music caption "<generated>" with the ground truth tags
/// "<original>", and do not add any imaginary elements.`
pub const FUSION_PROMPT: &str = "Merge this music caption \"<generated>\" with the ground truth tags \"<original>\", and do not add any imaginary elements.";

/// Fills the `<generated>` and `<original>` slots of `template`.
pub fn fusion_prompt(template: &str, generated: &str, original: &str) -> String {
    template
        .replace("<generated>", generated)
        .replace("<original>", original)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Thresholds {
    /// Generated captions need `S(T^g, M) > rho1`.
    pub rho1: f64,
    /// Original captions need `S(T^o, M) > rho2`.
    pub rho2: f64,
    /// Pairs with `S(T^o, T^g) < rho3` are fused.
    pub rho3: f64,
}

impl Default for Thresholds {
    fn default() -> Self {
        Self {
            rho1: 0.1,
            rho2: 0.1,
            rho3: 0.25,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RefineConfig {
    #[serde(default)]
    pub thresholds: Thresholds,
    #[serde(default = "default_prompt")]
    pub fusion_prompt: String,
    /// Upper bound on concurrent client calls.
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub cache_dir: Option<PathBuf>,
    #[serde(default)]
    pub captioner: ClientConfig,
    #[serde(default)]
    pub scorer: ClientConfig,
    #[serde(default)]
    pub fuser: ClientConfig,
}

fn default_prompt() -> String {
    FUSION_PROMPT.to_string()
}

fn default_in_flight() -> usize {
    4
}

impl Default for RefineConfig {
    fn default() -> Self {
        Self {
            thresholds: Thresholds::default(),
            fusion_prompt: default_prompt(),
            max_in_flight: default_in_flight(),
            cache_dir: None,
            captioner: ClientConfig::default(),
            scorer: ClientConfig::default(),
            fuser: ClientConfig::default(),
        }
    }
}

/// The three external roles.
pub struct Clients {
    pub captioner: Box<dyn Captioner>,
    pub scorer: Box<dyn Scorer>,
    pub fuser: Box<dyn Fuser>,
}

fn wrap<T, C>(
    client: C,
    cache: &Option<DiskCache>,
    boxed: fn(C) -> Box<T>,
    cached: fn(Cached<C>) -> Box<T>,
) -> Box<T>
where
    T: ?Sized,
{
    match cache {
        Some(c) => cached(Cached::new(client, c.clone())),
        None => boxed(client),
    }
}

impl Clients {
    /// Builds clients from configuration, adding the disk cache when set.
    pub fn from_config(cfg: &RefineConfig) -> Result<Self> {
        let cache = cfg.cache_dir.as_ref().map(DiskCache::new).transpose()?;
        let captioner: Box<dyn Captioner> = match cfg.captioner.mode {
            ClientMode::Http => wrap(
                HttpClient::new(&cfg.captioner)?,
                &cache,
                |c| Box::new(c),
                |c| Box::new(c),
            ),
            ClientMode::Mock => wrap(
                MockClient::from_config("captioner", &cfg.captioner)?,
                &cache,
                |c| Box::new(c),
                |c| Box::new(c),
            ),
        };
        let scorer: Box<dyn Scorer> = match cfg.scorer.mode {
            ClientMode::Http => wrap(
                HttpClient::new(&cfg.scorer)?,
                &cache,
                |c| Box::new(c),
                |c| Box::new(c),
            ),
            ClientMode::Mock => wrap(
                MockClient::from_config("scorer", &cfg.scorer)?,
                &cache,
                |c| Box::new(c),
                |c| Box::new(c),
            ),
        };
        let fuser: Box<dyn Fuser> = match cfg.fuser.mode {
            ClientMode::Http => wrap(
                HttpClient::new(&cfg.fuser)?,
                &cache,
                |c| Box::new(c),
                |c| Box::new(c),
            ),
            ClientMode::Mock => wrap(
                MockClient::from_config("fuser", &cfg.fuser)?,
                &cache,
                |c| Box::new(c),
                |c| Box::new(c),
            ),
        };
        Ok(Self {
            captioner,
            scorer,
            fuser,
        })
    }
}

fn pending(r: &CaptionRecord) -> bool {
    r.provenance.is_none()
}

/// Fills `T^g` for pending records that lack one. A captioner failure marks
/// the record `failed`, keeps its original caption and does not stop others.
pub fn generate_captions(records: &mut [CaptionRecord], captioner: &dyn Captioner, limit: usize) {
    let todo: Vec<usize> = (0..records.len())
        .filter(|&i| pending(&records[i]) && records[i].generated_caption.is_none())
        .collect();
    let ids: Vec<String> = todo.iter().map(|&i| records[i].id.clone()).collect();
    let replies = bounded_map(&ids, limit, |id| captioner.caption(id));
    for (i, reply) in todo.into_iter().zip(replies) {
        let r = &mut records[i];
        match reply {
            Ok(caption) => r.generated_caption = Some(caption),
            Err(e) => {
                log::warn!("captioner failed for {}: {e}", r.id);
                r.flag(Flag::CaptionerFailed);
                r.provenance = Some(Provenance::Failed);
                r.final_caption = Some(r.original_caption.clone());
                if !r.has_original() {
                    r.flag(Flag::Unusable);
                }
            }
        }
    }
}

/// Scores `text` of every pending record against its audio and returns, per
/// record, whether the score strictly exceeds `rho`. Missing text or a scorer
/// failure means "not kept"; failures are flagged.
fn filter_by_audio(
    records: &mut [CaptionRecord],
    scorer: &dyn Scorer,
    rho: f64,
    limit: usize,
    text: fn(&CaptionRecord) -> Option<&str>,
    slot: fn(&mut CaptionRecord) -> &mut Option<f64>,
) -> Vec<bool> {
    let todo: Vec<(usize, String, String)> = records
        .iter_mut()
        .enumerate()
        .filter_map(|(i, r)| (pending(r) && slot(r).is_none()).then_some((i, r)))
        .filter_map(|(i, r)| text(r).map(|t| (i, t.to_string(), r.id.clone())))
        .collect();
    let scores = bounded_map(&todo, limit, |(_, t, id)| scorer.text_audio(t, id));
    for ((i, _, _), s) in todo.iter().zip(scores) {
        match s {
            Ok(s) => *slot(&mut records[*i]) = Some(s),
            Err(e) => {
                log::warn!("scorer failed for {}: {e}", records[*i].id);
                records[*i].flag(Flag::ScorerFailed);
            }
        }
    }
    records
        .iter_mut()
        .map(|r| pending(r) && text(r).is_some() && slot(r).is_some_and(|s| s > rho))
        .collect()
}

fn generated_text(r: &CaptionRecord) -> Option<&str> {
    r.generated_caption.as_deref()
}

fn original_text(r: &CaptionRecord) -> Option<&str> {
    r.has_original().then_some(r.original_caption.as_str())
}

/// Keeps records whose generated caption scores `S(T^g, M) > rho1`.
pub fn filter_generated(
    records: &mut [CaptionRecord],
    scorer: &dyn Scorer,
    rho1: f64,
    limit: usize,
) -> Vec<bool> {
    filter_by_audio(records, scorer, rho1, limit, generated_text, |r| {
        &mut r.sim_gen_audio
    })
}

/// Keeps records whose original caption scores `S(T^o, M) > rho2`; an empty
/// original never passes.
pub fn filter_original(
    records: &mut [CaptionRecord],
    scorer: &dyn Scorer,
    rho2: f64,
    limit: usize,
) -> Vec<bool> {
    filter_by_audio(records, scorer, rho2, limit, original_text, |r| {
        &mut r.sim_orig_audio
    })
}

/// Decides the final caption of one record from its filter results:
///
/// | generated passed | original passed | `S(T^o, T^g)` | result |
/// |---|---|---|---|
/// | no  | any | –      | original |
/// | yes | no  | –      | generated |
/// | yes | yes | `≥ ρ₃` | generated |
/// | yes | yes | `< ρ₃` | fused |
pub fn select_and_fuse(
    record: &mut CaptionRecord,
    passed_generated: bool,
    passed_original: bool,
    scorer: &dyn Scorer,
    fuser: &dyn Fuser,
    rho3: f64,
    template: &str,
) {
    if !pending(record) {
        return;
    }
    let generated = match (&record.generated_caption, passed_generated) {
        (Some(g), true) => g.clone(),
        _ => {
            record.final_caption = Some(record.original_caption.clone());
            record.provenance = Some(Provenance::Original);
            if !record.has_original() {
                record.flag(Flag::Unusable);
            }
            return;
        }
    };
    record.provenance = Some(Provenance::Generated);
    record.final_caption = Some(generated.clone());
    if !passed_original {
        return;
    }
    let sim = match record.sim_text_text {
        Some(s) => s,
        None => match scorer.text_text(&record.original_caption, &generated) {
            Ok(s) => {
                record.sim_text_text = Some(s);
                s
            }
            Err(e) => {
                log::warn!("text-text scoring failed for {}: {e}", record.id);
                record.flag(Flag::ScorerFailed);
                return;
            }
        },
    };
    if sim < rho3 {
        match fuser.fuse(&fusion_prompt(
            template,
            &generated,
            &record.original_caption,
        )) {
            Ok(text) => {
                record.final_caption = Some(text);
                record.provenance = Some(Provenance::Fused);
            }
            Err(e) => {
                log::warn!("fusion failed for {}: {e}", record.id);
                record.flag(Flag::FuserFailed);
            }
        }
    }
}

/// Per-provenance counts over the whole manifest.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefineSummary {
    pub total: usize,
    /// Records that already had a provenance before this run.
    pub skipped: usize,
    pub original: usize,
    pub generated: usize,
    pub fused: usize,
    pub failed: usize,
    /// Generated captions rejected by the ρ₁ filter (this run).
    pub filtered_generated: usize,
    /// Original captions rejected by the ρ₂ filter or absent (this run).
    pub filtered_original: usize,
    /// Records carrying at least one flag, by flag.
    pub flags: BTreeMap<String, usize>,
}

/// Runs all stages over `records`, preserving their order.
pub fn run_pipeline(
    mut records: Vec<CaptionRecord>,
    clients: &Clients,
    cfg: &RefineConfig,
) -> Result<(Vec<CaptionRecord>, RefineSummary)> {
    let t = cfg.thresholds;
    for (name, v) in [("rho1", t.rho1), ("rho2", t.rho2), ("rho3", t.rho3)] {
        if !v.is_finite() {
            return Err(Error::InvalidArgument(format!("{name} must be finite")));
        }
    }
    let limit = cfg.max_in_flight.max(1);
    let skipped = records.iter().filter(|r| !pending(r)).count();

    generate_captions(&mut records, clients.captioner.as_ref(), limit);
    let gen_ok = filter_generated(&mut records, clients.scorer.as_ref(), t.rho1, limit);
    let orig_ok = filter_original(&mut records, clients.scorer.as_ref(), t.rho2, limit);
    let mut summary = RefineSummary {
        total: records.len(),
        skipped,
        ..Default::default()
    };
    for (r, (&g, &o)) in records.iter().zip(gen_ok.iter().zip(&orig_ok)) {
        if pending(r) {
            summary.filtered_generated += usize::from(!g);
            summary.filtered_original += usize::from(!o);
        }
    }

    let jobs: Vec<(CaptionRecord, bool, bool)> = records
        .into_iter()
        .zip(gen_ok.into_iter().zip(orig_ok))
        .map(|(r, (g, o))| (r, g, o))
        .collect();
    let records: Vec<CaptionRecord> = bounded_map(&jobs, limit, |(r, g, o)| {
        let mut r = r.clone();
        select_and_fuse(
            &mut r,
            *g,
            *o,
            clients.scorer.as_ref(),
            clients.fuser.as_ref(),
            t.rho3,
            &cfg.fusion_prompt,
        );
        r
    });

    for r in &records {
        match r.provenance {
            Some(Provenance::Original) => summary.original += 1,
            Some(Provenance::Generated) => summary.generated += 1,
            Some(Provenance::Fused) => summary.fused += 1,
            Some(Provenance::Failed) => summary.failed += 1,
            None => {
                return Err(Error::InvalidArgument(format!(
                    "record {} left without provenance",
                    r.id
                )))
            }
        }
        for f in &r.flags {
            let key = serde_json::to_value(f)?
                .as_str()
                .unwrap_or_default()
                .to_string();
            *summary.flags.entry(key).or_default() += 1;
        }
    }
    Ok((records, summary))
}

/// Runs the pipeline over raw manifest lines. Caption fields are rewritten;
/// any other fields on a line pass through unchanged.
pub fn refine_manifest(
    lines: Vec<serde_json::Value>,
    clients: &Clients,
    cfg: &RefineConfig,
) -> Result<(Vec<serde_json::Value>, RefineSummary)> {
    let records = lines
        .iter()
        .map(|v| serde_json::from_value::<CaptionRecord>(v.clone()))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let (records, summary) = run_pipeline(records, clients, cfg)?;
    let mut out = Vec::with_capacity(lines.len());
    for (mut line, record) in lines.into_iter().zip(records) {
        let serde_json::Value::Object(fields) = serde_json::to_value(&record)? else {
            unreachable!("records serialize to objects")
        };
        let obj = line.as_object_mut().ok_or_else(|| {
            Error::InvalidArgument(format!("manifest line for {} is not an object", record.id))
        })?;
        obj.remove("flags");
        obj.extend(fields);
        out.push(line);
    }
    Ok((out, summary))
}
