//! Matrix text parser.
//!
//! ```bash
//! cargo fuzz run matrix_text -- -only_ascii=1
//! ```

#![no_main]

use libfuzzer_sys::fuzz_target;
use lipforge_core::tensor::parse_matrix;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    if let Ok(m) = parse_matrix(text) {
        assert!(m.data().iter().all(|v| v.is_finite()));
        assert_eq!(m.data().len(), m.rows() * m.cols());
        let again = parse_matrix(&m.to_string()).expect("printed matrices parse");
        assert_eq!(again, m);
    }
});
