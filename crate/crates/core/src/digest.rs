use ndarray::ArrayView2;
use sha2::{Digest, Sha256};

/// Incremental SHA-256 over tagged fields; every field is length-prefixed so
/// adjacent values cannot alias.
pub(crate) struct Fingerprint(Sha256);

impl Fingerprint {
    pub(crate) fn new(tag: &str) -> Self {
        let mut f = Self(Sha256::new());
        f.str(tag);
        f
    }

    pub(crate) fn str(&mut self, s: &str) -> &mut Self {
        self.0.update((s.len() as u64).to_le_bytes());
        self.0.update(s.as_bytes());
        self
    }

    pub(crate) fn u64(&mut self, v: u64) -> &mut Self {
        self.0.update(v.to_le_bytes());
        self
    }

    pub(crate) fn f64(&mut self, v: f64) -> &mut Self {
        self.0.update(v.to_bits().to_le_bytes());
        self
    }

    pub(crate) fn matrix(&mut self, m: ArrayView2<'_, f64>) -> &mut Self {
        self.u64(m.nrows() as u64).u64(m.ncols() as u64);
        for v in m.iter() {
            self.0.update(v.to_bits().to_le_bytes());
        }
        self
    }

    pub(crate) fn finish(self) -> String {
        hex::encode(self.0.finalize())
    }
}
