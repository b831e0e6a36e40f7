//! Initializing a segmentation network from a pretrained reconstruction
//! network: every layer but the output layer is copied.

use std::fmt;

use super::{Checkpoint, Model, ModelConfig};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferReport {
    pub transferred: Vec<String>,
    /// Layers left at their fresh initialization.
    pub fresh: Vec<String>,
}

impl fmt::Display for TransferReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let total = self.transferred.len() + self.fresh.len();
        write!(f, "transferred {}/{} layers", self.transferred.len(), total)
    }
}

/// Builds a `target` network and copies every tensor of every layer except
/// the last from `source`, including batch-norm running statistics.
pub fn transfer_weights(source: &Checkpoint, target: ModelConfig) -> Result<(Model<f32>, TransferReport)> {
    let mut model = Model::<f32>::build(target)?;
    let last = model.layers().last().map(|l| l.name.clone()).unwrap_or_default();
    let wanted: Vec<_> = model
        .param_infos()
        .into_iter()
        .filter(|i| i.name.split('.').next() != Some(last.as_str()))
        .collect();

    let mismatched: Vec<String> = wanted
        .iter()
        .filter(|i| source.tensor(&i.name).is_none_or(|b| b.shape != i.shape))
        .map(|i| match source.tensor(&i.name) {
            Some(b) => format!("{} (source {:?}, target {:?})", i.name, b.shape, i.shape),
            None => format!("{} (missing in source)", i.name),
        })
        .collect();
    if !mismatched.is_empty() {
        return Err(Error::Transfer(mismatched));
    }
    for info in &wanted {
        let blob = source.tensor(&info.name).expect("checked above");
        model.set_tensor(&info.name, &blob.data)?;
    }

    let mut transferred: Vec<String> = Vec::new();
    let mut fresh = Vec::new();
    for l in model.layers() {
        if l.name == last {
            fresh.push(l.name.clone());
        } else {
            transferred.push(l.name.clone());
        }
    }
    Ok((model, TransferReport { transferred, fresh }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TrainingMeta;

    const W: [usize; 5] = [4, 6, 6, 8, 8];

    fn pretrained() -> Checkpoint {
        let m = Model::<f32>::build(ModelConfig::reconstruction().with_widths(W).with_seed(11)).unwrap();
        Checkpoint::from_model(&m, TrainingMeta::new(&m, 1, 1, 0.01), None)
    }

    #[test]
    fn copies_all_but_output_layer() {
        let src = pretrained();
        let (m, report) = transfer_weights(&src, ModelConfig::segmentation(9).with_widths(W).with_seed(2)).unwrap();
        assert_eq!(report.to_string(), "transferred 9/10 layers");
        assert_eq!(report.fresh, ["dec5"]);
        for (name, _, data, _) in m.named_tensors() {
            let same = src.tensor(&name).is_some_and(|b| b.data == data);
            assert_eq!(same, !name.starts_with("dec5"), "{name}");
        }
        assert_eq!(m.layers()[9].weight.shape().c(), 9);
    }

    #[test]
    fn width_mismatch_lists_parameters() {
        let src = pretrained();
        let err = transfer_weights(&src, ModelConfig::segmentation(9).with_widths([4, 6, 6, 8, 16])).unwrap_err();
        let Error::Transfer(names) = &err else { panic!("{err}") };
        assert!(names.iter().any(|n| n.starts_with("enc5.weight")));
        assert!(names.iter().any(|n| n.starts_with("dec1.weight")));
        assert!(!names.iter().any(|n| n.starts_with("enc1")));
    }
}
