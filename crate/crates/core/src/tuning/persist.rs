use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DecoderHead, Ensemble, EnsembleMember, TuneConfig, TunedPrompt};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const PROMPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct PromptManifest {
    format_version: u32,
    p: usize,
    class_count: usize,
    y_part: Vec<usize>,
    config: TuneConfig,
    val_score: Option<f64>,
    has_decoder: bool,
}

#[derive(Serialize, Deserialize)]
struct MemberEntry {
    dir: String,
    feature_perm: Vec<usize>,
    label_perm: Vec<usize>,
    val_accuracy: f64,
}

#[derive(Serialize, Deserialize)]
struct RankingManifest {
    top_k: usize,
    ranking: Vec<usize>,
    members: Vec<MemberEntry>,
}

/// Writes `prompt.json`, `x_part.bin` and, for class-extended prompts,
/// `decoder.bin` into `dir`.
pub fn save_prompt(prompt: &TunedPrompt, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = PromptManifest {
        format_version: PROMPT_VERSION,
        p: prompt.p(),
        class_count: prompt.class_count,
        y_part: prompt.y_part.clone(),
        config: prompt.config.clone(),
        val_score: prompt.val_score,
        has_decoder: prompt.decoder.is_some(),
    };
    fs::write(dir.join("prompt.json"), serde_json::to_string_pretty(&manifest)?)?;
    fs::write(dir.join("x_part.bin"), prompt.x_part.to_bytes())?;
    if let Some(head) = &prompt.decoder {
        let mut w = BufWriter::new(fs::File::create(dir.join("decoder.bin"))?);
        for t in &head.tensors {
            t.write_to(&mut w)?;
        }
        w.flush()?;
    }
    Ok(())
}

pub fn load_prompt(dir: &Path) -> Result<TunedPrompt> {
    let m: PromptManifest = serde_json::from_str(&fs::read_to_string(dir.join("prompt.json"))?)?;
    if m.format_version != PROMPT_VERSION {
        return Err(Error::Format(format!(
            "unsupported prompt version {}",
            m.format_version
        )));
    }
    let x_part = Tensor::read_from(&mut fs::read(dir.join("x_part.bin"))?.as_slice())?;
    if x_part.shape().first() != Some(&m.p) || m.y_part.len() != m.p {
        return Err(Error::Format(format!(
            "prompt length {} disagrees with stored tensor {:?}",
            m.p,
            x_part.shape()
        )));
    }
    let decoder = if m.has_decoder {
        let mut r = BufReader::new(fs::File::open(dir.join("decoder.bin"))?);
        let tensors = (0..4).map(|_| Tensor::read_from(&mut r)).collect::<Result<Vec<_>>>()?;
        Some(DecoderHead { tensors })
    } else {
        None
    };
    Ok(TunedPrompt {
        x_part,
        y_part: m.y_part,
        class_count: m.class_count,
        decoder,
        config: m.config,
        val_score: m.val_score,
    })
}

/// Writes each member under `member_<i>/` plus `ranking.json`.
pub fn save_ensemble(ens: &Ensemble, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut members = Vec::with_capacity(ens.members.len());
    for (i, m) in ens.members.iter().enumerate() {
        let name = format!("member_{i}");
        save_prompt(&m.prompt, &dir.join(&name))?;
        members.push(MemberEntry {
            dir: name,
            feature_perm: m.feature_perm.clone(),
            label_perm: m.label_perm.clone(),
            val_accuracy: m.val_accuracy,
        });
    }
    let manifest = RankingManifest {
        top_k: ens.top_k,
        ranking: ens.ranking.clone(),
        members,
    };
    fs::write(dir.join("ranking.json"), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_ensemble(dir: &Path) -> Result<Ensemble> {
    let m: RankingManifest = serde_json::from_str(&fs::read_to_string(dir.join("ranking.json"))?)?;
    let members = m
        .members
        .into_iter()
        .map(|e| {
            Ok(EnsembleMember {
                prompt: load_prompt(&dir.join(&e.dir))?,
                feature_perm: e.feature_perm,
                label_perm: e.label_perm,
                val_accuracy: e.val_accuracy,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Ensemble {
        members,
        ranking: m.ranking,
        top_k: m.top_k,
    })
}
