#![no_main]

use libfuzzer_sys::fuzz_target;
use posthoc::features::ScoreModels;
use posthoc::usecases::PosthocModel;

fuzz_target!(|data: &[u8]| {
    let Ok(text) = std::str::from_utf8(data) else {
        return;
    };
    if let Ok(model) = PosthocModel::from_json_str(text) {
        let again = PosthocModel::from_json_str(&model.to_json_string()).expect("reload");
        assert_eq!(again, model);
    }
    let _ = ScoreModels::from_json_str(text);
});
