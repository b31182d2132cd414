#![no_main]

use libfuzzer_sys::fuzz_target;
use posthoc::data::{Corpus, IngestOptions, Task};

fuzz_target!(|data: &[u8]| {
    for task in [Task::Detection, Task::Classification] {
        if let Ok(corpus) = Corpus::from_reader(data, &IngestOptions::new(task)) {
            // Anything accepted must survive a write/read cycle unchanged.
            let opts = IngestOptions::new(task).with_num_classes(corpus.num_classes);
            let back = Corpus::from_jsonl_str(&corpus.to_jsonl_string(), &opts).expect("re-ingest");
            assert_eq!(back, corpus);
        }
    }
});
