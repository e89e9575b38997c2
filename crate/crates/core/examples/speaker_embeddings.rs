//! Built-in speaker embeddings of synthetic talkers: utterances of the same
//! speaker land closer together than utterances of different speakers.

use ossem::corpus::{derived_rng, Gender, SyntheticSpeaker};
use ossem::speaker::builtin_embed;

fn main() -> ossem::Result<()> {
    let mut rng = derived_rng(7, "example");
    let speakers = [
        SyntheticSpeaker::random("low", Gender::LowF0, &mut rng),
        SyntheticSpeaker::random("high", Gender::HighF0, &mut rng),
    ];
    let mut embs = Vec::new();
    for s in &speakers {
        for _ in 0..2 {
            embs.push(builtin_embed(&s.speaker_id, &s.utterance(&mut rng, 1.2, 16_000))?);
        }
    }
    for a in &embs {
        let row: Vec<String> = embs.iter().map(|b| format!("{:.3}", a.cosine(b))).collect();
        println!("{:<5} {}", a.speaker_id, row.join(" "));
    }
    Ok(())
}
