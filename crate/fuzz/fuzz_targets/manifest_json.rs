#![no_main]

use libfuzzer_sys::fuzz_target;
use lipforge_core::layers::manifest::ModelManifest;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(manifest) = ModelManifest::from_json(text) {
        let again = ModelManifest::from_json(&manifest.to_json()).expect("serialized manifests parse");
        assert_eq!(again, manifest);
    }
});
