#![no_main]

use libfuzzer_sys::fuzz_target;

use demandmech::model::build_instance;
use demandmech::scenario::{scenario_from_instance, Scenario};

// Scenario ingestion must never panic: parse, validate, and (when the input
// is a valid community) round-trip the instance through its serialized form.
fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else { return };
    let Ok(scenario) = Scenario::from_json(text) else { return };
    let Ok(instance) = build_instance(&scenario) else { return };
    let back = scenario_from_instance(&instance);
    let reparsed = build_instance(&back).expect("serialized instances stay valid");
    assert_eq!(instance, reparsed);
});
