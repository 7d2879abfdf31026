#![no_main]

use libfuzzer_sys::fuzz_target;

use collagan::config::KvFile;
use collagan::trainer::TrainConfig;

fuzz_target!(|data: &[u8]| {
    if let Ok(text) = std::str::from_utf8(data) {
        if let Ok(kv) = KvFile::parse(text) {
            let _ = TrainConfig::from_kv(&kv);
        }
    }
});
