//! Replication CSVs feed the scaling algebra, whose constructors treat a
//! bad grid or non-finite accumulator as a programming error. The reader
//! must therefore reject any input those constructors would choke on;
//! every accepted record has to flow through the rescalings cleanly.

#![no_main]

use htnet::io::read_paths_csv;
use htnet::scaling::{free_processes, mass_conservation_defect, scale_path};
use libfuzzer_sys::fuzz_target;

fuzz_target!(|data: &[u8]| {
    let Ok((records, _config)) = read_paths_csv(data) else {
        return;
    };
    for record in records.iter().take(3) {
        let bundle = scale_path(record);
        let (xi, zeta) = free_processes(record);
        let _ = mass_conservation_defect(&xi, &zeta);
        let _ = bundle.hat_q.sup_norm();
    }
});
