use serde::Serialize;

use crate::asr::{greedy_decode, wer_str, AsrModel};
use crate::cleancoder::CleancoderModel;
use crate::corpus::{load_audio, Alphabet, Manifest};
use crate::dsp::log_mel;
use crate::error::Result;
use crate::parallel;

pub const CONDITION_NOISY: &str = "noisy";
pub const CONDITION_DENOISED: &str = "denoised";

/// WER of one manifest row under one condition.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RowResult {
    pub id: String,
    pub snr_db: f64,
    pub noise_type: String,
    pub condition: String,
    pub wer: f64,
    #[serde(rename = "ref")]
    pub reference: String,
    pub hyp: String,
}

/// A row that could not be evaluated.
#[derive(Clone, Debug, PartialEq)]
pub struct RowError {
    pub id: String,
    pub message: String,
}

/// Decode every row's noisy audio, optionally through a frontend, and score
/// it against the transcript. Rows that fail are reported separately and
/// do not stop the run.
pub fn evaluate_model(
    model: &AsrModel,
    manifest: &Manifest,
    frontend: Option<&CleancoderModel>,
    alphabet: &Alphabet,
    word_len: usize,
) -> (Vec<RowResult>, Vec<RowError>) {
    let condition = if frontend.is_some() { CONDITION_DENOISED } else { CONDITION_NOISY };
    let outcomes = parallel::map(&manifest.rows, |_, row| -> Result<RowResult> {
        let audio = load_audio(&manifest.resolve(&row.noisy_path))?;
        let mut spec = log_mel(&audio)?;
        if let Some(f) = frontend {
            spec = f.forward(&spec)?;
        }
        let lp = model.log_probs(&spec)?;
        let hyp = alphabet.render_words(&greedy_decode(&lp), word_len);
        Ok(RowResult {
            id: row.id.clone(),
            snr_db: row.snr_db,
            noise_type: row.noise_type.clone(),
            condition: condition.to_string(),
            wer: wer_str(&row.text, &hyp),
            reference: row.text.clone(),
            hyp,
        })
    });
    let mut results = Vec::new();
    let mut errors = Vec::new();
    for (row, outcome) in manifest.rows.iter().zip(outcomes) {
        match outcome {
            Ok(r) => results.push(r),
            Err(e) => {
                log::warn!("row {} failed: {e}", row.id);
                errors.push(RowError { id: row.id.clone(), message: e.to_string() });
            }
        }
    }
    (results, errors)
}
