#![no_main]

use libfuzzer_sys::fuzz_target;

use demandmech::fixtures;
use demandmech::mech_central::{payoff, tax, CentralMessageProfile};
use demandmech::scenario::ProfileFile;

// Stored message profiles are untrusted: parsing, validation against the
// bundled community, and tax/payoff evaluation must never panic.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(file) = ProfileFile::from_json(text) else { return };
    let inst = fixtures::example_instance();
    let Ok(profile) = CentralMessageProfile::from_file(&file, &inst) else {
        return;
    };
    for i in 0..inst.n_users() {
        let _ = tax(&inst, &profile, i).total();
        let _ = payoff(&inst, &profile, i);
    }
});
