use cfgcd_autodiff::Tensor;
use sha2::{Digest, Sha256};

/// SHA-256 over shapes and little-endian values, hex encoded.
pub fn checksum_tensors<'a>(tensors: impl IntoIterator<Item = &'a Tensor>) -> String {
    let mut h = Sha256::new();
    for t in tensors {
        let [r, c] = t.shape();
        h.update((r as u64).to_le_bytes());
        h.update((c as u64).to_le_bytes());
        for x in t.data() {
            h.update(x.to_le_bytes());
        }
    }
    hex::encode(h.finalize())
}
