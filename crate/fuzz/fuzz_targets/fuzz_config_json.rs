//! JSON network configs are the first untrusted input surface: anything
//! the parser accepts must survive parameter resolution and the
//! heavy-traffic report without panicking. Extreme but finite rates may
//! legitimately produce infinite residuals, so the only property checked
//! here is the absence of panics.

#![no_main]

use htnet::io::parse_network_config;
use htnet::netmodel::NetworkParams;
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok(config) = parse_network_config(data) else {
        return;
    };
    for renormalize in [false, true] {
        if let Ok(params) = NetworkParams::from_config(&config, renormalize) {
            let _ = params.heavy_traffic_report(1e-9);
        }
    }
});
