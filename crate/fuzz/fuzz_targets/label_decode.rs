#![no_main]

use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let taxonomy = badseg::data::ClassTaxonomy::synthetic_default();
    let _ = badseg::data::decode_label_bytes(data, &taxonomy, "fuzz");
    let _ = badseg::data::decode_image_bytes(data);
});
