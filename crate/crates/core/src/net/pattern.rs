use super::trace::Trace;
use super::{Layer, Network};

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub enum PatternEntry {
    /// Active units of a hidden ReLU layer.
    Relu(Vec<bool>),
    /// Selected flat input index of every pooled output.
    Pool(Vec<u32>),
}

/// The signature of a linear region: one entry per ReLU or pool layer, in
/// layer order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct ActivationPattern {
    pub entries: Vec<PatternEntry>,
}

impl ActivationPattern {
    pub(crate) fn from_trace(net: &Network, trace: &Trace, row: usize) -> Self {
        let mut entries = Vec::new();
        for (l, layer) in net.layers().iter().enumerate() {
            let t = &trace.layers[l];
            if let Some(mask) = &t.mask {
                entries.push(PatternEntry::Relu(mask.row(row).to_vec()));
            } else if matches!(layer, Layer::MaxPool2) {
                let idx = t.argmax.as_ref().expect("pool trace");
                entries.push(PatternEntry::Pool(idx.row(row).to_vec()));
            }
        }
        ActivationPattern { entries }
    }

    pub fn active_units(&self) -> usize {
        self.entries
            .iter()
            .map(|e| match e {
                PatternEntry::Relu(m) => m.iter().filter(|&&on| on).count(),
                PatternEntry::Pool(_) => 0,
            })
            .sum()
    }

    /// Canonical byte encoding: per entry a tag byte, the entry length as
    /// little-endian u32, then packed mask bits (LSB first) or little-endian
    /// u32 pool indices.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for e in &self.entries {
            match e {
                PatternEntry::Relu(mask) => {
                    out.push(b'R');
                    out.extend_from_slice(&(mask.len() as u32).to_le_bytes());
                    for chunk in mask.chunks(8) {
                        let byte = chunk
                            .iter()
                            .enumerate()
                            .fold(0u8, |acc, (i, &on)| acc | ((on as u8) << i));
                        out.push(byte);
                    }
                }
                PatternEntry::Pool(idx) => {
                    out.push(b'P');
                    out.extend_from_slice(&(idx.len() as u32).to_le_bytes());
                    for &i in idx {
                        out.extend_from_slice(&i.to_le_bytes());
                    }
                }
            }
        }
        out
    }
}
