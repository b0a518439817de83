use super::{caption_tokens, draw_batch, run_loop, AdapterSet, StepReport, TrainConfig, TrainableSelector};
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::networks::ModelBundle;
use crate::scheduler::NoiseSchedule;
use crate::tensor::{RngStream, Tensor};

/// A learned embedding row for one placeholder word.
#[derive(Debug, Clone, PartialEq)]
pub struct TiArtifact {
    pub placeholder: String,
    pub token_id: u32,
    /// `[1, d_txt]`.
    pub vector: Tensor,
}

fn row(table: &Tensor, id: usize) -> Tensor {
    let d = table.shape()[1];
    Tensor::new(vec![1, d], table.data()[id * d..(id + 1) * d].to_vec()).expect("row shape")
}

fn append_row(table: &Tensor, row: &Tensor) -> Tensor {
    let s = table.shape();
    let mut data = table.data().to_vec();
    data.extend_from_slice(row.data());
    Tensor::new(vec![s[0] + 1, s[1]], data).expect("grown table")
}

/// Appends `placeholder` to the vocabulary with an embedding row copied from
/// `init_word`'s row. The new id is the previous vocabulary size.
pub fn ti_extend_vocab(bundle: &mut ModelBundle, placeholder: &str, init_word: &str) -> Result<TiArtifact> {
    let words: Vec<&str> = init_word
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|w| !w.is_empty())
        .collect();
    let init_id = match words.as_slice() {
        [w] => bundle
            .vocab
            .id(&w.to_lowercase())
            .ok_or_else(|| Error::UnknownToken(w.to_string()))?,
        _ => {
            return Err(Error::invalid(format!(
                "initializer `{init_word}` must be exactly one known token"
            )))
        }
    };
    let table = bundle
        .params
        .get("text.tok_emb")
        .ok_or_else(|| Error::UnknownParameter("text.tok_emb".into()))?;
    if table.shape()[0] != bundle.vocab.len() {
        return Err(Error::State("embedding table and vocabulary disagree in size".into()));
    }
    let init = row(table, init_id as usize);
    let grown = append_row(table, &init);
    let token_id = bundle.vocab.add_placeholder(placeholder)?;
    bundle.params.insert("text.tok_emb".into(), grown);
    Ok(TiArtifact {
        placeholder: bundle.vocab.word(token_id).expect("just added").to_string(),
        token_id,
        vector: init,
    })
}

/// Installs a learned placeholder: overwrites its row when the placeholder
/// already exists at the same id, appends it when the id is the next free one.
pub fn apply_ti(bundle: &mut ModelBundle, art: &TiArtifact) -> Result<()> {
    let d = bundle.config.d_txt;
    if art.vector.shape() != [1, d] {
        return Err(Error::shape("apply_ti", art.vector.shape(), &[1, d]));
    }
    let table = bundle.params["text.tok_emb"].clone();
    match bundle.vocab.id(&art.placeholder) {
        Some(id) if id == art.token_id => {
            let mut t = table;
            let i = id as usize;
            t.data_mut()[i * d..(i + 1) * d].copy_from_slice(art.vector.data());
            bundle.params.insert("text.tok_emb".into(), t);
        }
        Some(id) => {
            return Err(Error::State(format!(
                "placeholder `{}` has id {id} here but {} in the artifact",
                art.placeholder, art.token_id
            )))
        }
        None if art.token_id as usize == bundle.vocab.len() => {
            bundle.vocab.add_placeholder(&art.placeholder)?;
            bundle.params.insert("text.tok_emb".into(), append_row(&table, &art.vector));
        }
        None => {
            return Err(Error::State(format!(
                "artifact id {} does not follow vocabulary size {}",
                art.token_id,
                bundle.vocab.len()
            )))
        }
    }
    Ok(())
}

/// Trains the placeholder's embedding row on captions `template` with
/// `{}` replaced by the placeholder. Every other parameter stays fixed.
pub fn ti_train(
    bundle: &mut ModelBundle,
    schedule: &NoiseSchedule,
    corpus: &Corpus,
    placeholder: &str,
    template: &str,
    cfg: &TrainConfig,
    rng: &RngStream,
    observe: impl FnMut(usize, &StepReport),
) -> Result<(TiArtifact, Vec<f64>)> {
    bundle.require_trained()?;
    if corpus.is_empty() {
        return Err(Error::invalid("textual inversion corpus is empty"));
    }
    let id = bundle
        .vocab
        .id(&placeholder.to_lowercase())
        .filter(|&i| i as usize >= bundle.vocab.base_size())
        .ok_or_else(|| Error::invalid(format!("placeholder `{placeholder}` is not in the vocabulary")))?;
    let caption = template.replace("{}", placeholder);
    let sel = TrainableSelector::textual_inversion(id as usize);
    let mut adapters = AdapterSet::default();
    let losses = run_loop(bundle, &mut adapters, schedule, &sel, cfg, rng, observe, |bundle, s| {
        let idx = draw_batch(corpus.len(), cfg.batch_size, &mut s.select);
        let captions = vec![caption.clone(); idx.len()];
        Ok(vec![(corpus.image_batch(&idx)?, caption_tokens(bundle, &captions)?, 1.0)])
    })?;
    let art = TiArtifact {
        placeholder: placeholder.to_lowercase(),
        token_id: id,
        vector: row(&bundle.params["text.tok_emb"], id as usize),
    };
    Ok((art, losses))
}
