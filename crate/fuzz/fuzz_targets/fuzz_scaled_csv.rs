//! Scaled CSVs drive the regulator. Any frame the reader accepts must
//! either regulate or fail with a typed error; drivers that push the
//! sweep outside f64 range have to surface as `NonFinite`, never as a
//! panic. Work per input is kept proportional to its size by skipping
//! frames beyond a fixed grid budget.

#![no_main]

use htnet::io::read_scaled_csv;
use htnet::netmodel::NetworkParams;
use htnet::regulator::{self, RegulatorInput, SolveMode};
use libfuzzer_sys::fuzz_target;

const MAX_CELLS: usize = 1 << 16;

fuzz_target!(|data: &[u8]| {
    let Ok((frames, config)) = read_scaled_csv(data) else {
        return;
    };
    let Ok(params) = NetworkParams::from_config(&config.network, false) else {
        return;
    };
    for frame in frames.iter().take(3) {
        if frame.xi.len() * (frame.xi.dim() + frame.zeta.dim()) > MAX_CELLS {
            continue;
        }
        let Ok(input) = RegulatorInput::new(&frame.xi, &frame.zeta, &params) else {
            continue;
        };
        if let Ok(out) = regulator::regulate(&input, SolveMode::Forward, 1e-10, 1) {
            let _ = regulator::complementarity_defect(&out.x, &out.u, 1e-9);
        }
    }
});
