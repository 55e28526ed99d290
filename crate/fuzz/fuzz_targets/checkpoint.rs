#![no_main]

use libfuzzer_sys::fuzz_target;
use reid_core::checkpoint::{decode_checkpoint, encode_checkpoint};

fuzz_target!(|data: &[u8]| {
    let Ok(ckpt) = decode_checkpoint(data) else {
        return;
    };
    // Optimizer state is not re-encoded here; the model and cursor must survive.
    let bytes = encode_checkpoint(&ckpt.model, None, ckpt.cursor).unwrap();
    let again = decode_checkpoint(&bytes).unwrap();
    assert_eq!(again.cursor, ckpt.cursor);
    assert_eq!(again.model.phase(), ckpt.model.phase());
    assert_eq!(again.model.num_heads(), ckpt.model.num_heads());
});
