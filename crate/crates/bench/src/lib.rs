//! Shared inputs for the kernel benchmarks in `benches/`.

use sentpair::{Config, Model, PairExample, PreparedPair, Target};

/// Realistic SICK-length pairs (9 to 12 tokens).
pub const PAIRS: [(&str, &str); 4] = [
    ("A group of kids is playing in a yard and an old man is standing", "A group of boys in a yard is playing and a man is standing"),
    ("The young boys are playing outdoors and the man is smiling nearby", "There is no boy playing outdoors and there is no man smiling"),
    ("A person in a black jacket is doing tricks on a motorbike", "A man in a black jacket is doing tricks on a motorbike"),
    ("Four children are doing backbends in the gym", "Four girls are doing backbends and playing outdoors"),
];

/// A full-size model with prepared pairs and targets.
pub fn full_size(task: sentpair::Task) -> (Model, Vec<(PreparedPair, Target)>) {
    let model = Model::new(&Config { task, ..Config::default() }).expect("default config builds");
    let items = PAIRS
        .iter()
        .enumerate()
        .map(|(i, (a, b))| {
            let ex = PairExample::new(i.to_string(), *a, *b, 3.5, sentpair::EntailmentLabel::Neutral, sentpair::Split::Train)
                .expect("valid pair");
            (model.prepare_example(&ex).expect("pair prepares"), Target::from(&ex))
        })
        .collect();
    (model, items)
}
