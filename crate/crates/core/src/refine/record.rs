use serde::{Deserialize, Serialize};

/// Where a record's final caption came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Original,
    Generated,
    Fused,
    /// The captioner could not be reached; the original caption is kept.
    Failed,
}

/// Per-record problems that did not stop the pipeline.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Flag {
    CaptionerFailed,
    ScorerFailed,
    FuserFailed,
    /// No usable caption survived; training should skip the record.
    Unusable,
}

/// One caption line of a manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub id: String,
    /// The dataset's own caption `T^o`; may be empty.
    #[serde(default)]
    pub original_caption: String,
    /// Captioner output `T^g`.
    #[serde(default)]
    pub generated_caption: Option<String>,
    #[serde(default)]
    pub sim_gen_audio: Option<f64>,
    #[serde(default)]
    pub sim_orig_audio: Option<f64>,
    #[serde(default)]
    pub sim_text_text: Option<f64>,
    #[serde(default)]
    pub final_caption: Option<String>,
    #[serde(default)]
    pub provenance: Option<Provenance>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub flags: Vec<Flag>,
}

impl CaptionRecord {
    pub fn new(id: impl Into<String>, original: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            original_caption: original.into(),
            generated_caption: None,
            sim_gen_audio: None,
            sim_orig_audio: None,
            sim_text_text: None,
            final_caption: None,
            provenance: None,
            flags: Vec::new(),
        }
    }

    /// The caption training should use: the refined one when present.
    pub fn training_caption(&self) -> &str {
        match &self.final_caption {
            Some(c) if self.provenance.is_some() => c,
            _ => &self.original_caption,
        }
    }

    pub fn flag(&mut self, flag: Flag) {
        if !self.flags.contains(&flag) {
            self.flags.push(flag);
            self.flags.sort();
        }
    }

    pub fn has_original(&self) -> bool {
        !self.original_caption.trim().is_empty()
    }
}
