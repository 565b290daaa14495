use super::PAD;
use crate::error::{Error, Result};

/// Right-padded source and target ids for a group of sentence pairs.
///
/// Masks are derived from the recorded lengths, not from PAD ids, so content
/// beyond a row's length never influences the real positions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub rows: usize,
    pub src: Vec<usize>,
    pub src_width: usize,
    pub src_lens: Vec<usize>,
    /// Decoder inputs (target without its last token).
    pub tgt_in: Vec<usize>,
    /// Prediction targets (target without its first token), PAD beyond length.
    pub tgt_out: Vec<usize>,
    pub tgt_width: usize,
    pub tgt_lens: Vec<usize>,
}

fn pad_rows(seqs: &[&[usize]], width: usize) -> Vec<usize> {
    let mut out = Vec::with_capacity(seqs.len() * width);
    for s in seqs {
        out.extend_from_slice(s);
        out.resize(out.len() + width - s.len(), PAD);
    }
    out
}

impl Batch {
    /// Builds a training batch from `(source, target)` pairs whose targets
    /// carry BOS and EOS.
    pub fn from_pairs<'a, I>(pairs: I) -> Result<Self>
    where
        I: IntoIterator<Item = (&'a [usize], &'a [usize])>,
    {
        let mut srcs = Vec::new();
        let mut ins = Vec::new();
        let mut outs = Vec::new();
        for (src, tgt) in pairs {
            if tgt.len() < 2 {
                return Err(Error::InvalidArgument(
                    "target needs at least BOS and one more token".into(),
                ));
            }
            srcs.push(src);
            ins.push(&tgt[..tgt.len() - 1]);
            outs.push(&tgt[1..]);
        }
        let mut batch = Self::from_inputs(&srcs, &ins)?;
        batch.tgt_out = pad_rows(&outs, batch.tgt_width);
        Ok(batch)
    }

    /// Builds a batch from decoder inputs only; every `tgt_out` entry is PAD.
    pub fn from_inputs(srcs: &[&[usize]], tgt_in: &[&[usize]]) -> Result<Self> {
        if srcs.is_empty() {
            return Err(Error::EmptyDataset("batch has no rows".into()));
        }
        if srcs.len() != tgt_in.len() {
            return Err(Error::InvalidArgument(format!(
                "{} sources but {} targets",
                srcs.len(),
                tgt_in.len()
            )));
        }
        if srcs.iter().any(|s| s.is_empty()) {
            return Err(Error::InvalidArgument("empty source sequence".into()));
        }
        if tgt_in.iter().any(|t| t.is_empty()) {
            return Err(Error::InvalidArgument("empty target sequence".into()));
        }
        let rows = srcs.len();
        let src_width = srcs.iter().map(|s| s.len()).max().unwrap_or(0);
        let tgt_width = tgt_in.iter().map(|t| t.len()).max().unwrap_or(0);
        Ok(Self {
            rows,
            src: pad_rows(srcs, src_width),
            src_width,
            src_lens: srcs.iter().map(|s| s.len()).collect(),
            tgt_in: pad_rows(tgt_in, tgt_width),
            tgt_out: vec![PAD; rows * tgt_width],
            tgt_width,
            tgt_lens: tgt_in.iter().map(|t| t.len()).collect(),
        })
    }

    /// Number of scored (non-pad) target positions.
    pub fn target_tokens(&self) -> usize {
        self.tgt_out.iter().filter(|&&t| t != PAD).count()
    }
}
