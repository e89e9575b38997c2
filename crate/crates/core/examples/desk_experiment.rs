//! The desk-scale experiment: synthetic corpus, pretraining, meta-training,
//! then unadapted versus one-shot-adapted enhancement of held-out speakers.
//!
//! Pass a directory to keep the corpus between runs.

use std::time::Instant;

use ossem::config::RunConfig;
use ossem::corpus::{export_masks, gen_corpus, Corpus};
use ossem::pipeline::{self, Prepared};

fn main() -> ossem::Result<()> {
    let tmp = tempfile::tempdir()?;
    let dir = std::env::args().nth(1).map_or_else(|| tmp.path().to_path_buf(), Into::into);
    let cfg = RunConfig { corpus_dir: dir.clone(), ..RunConfig::desk() }.resolve()?;

    let start = Instant::now();
    if Corpus::open(&dir).is_err() {
        gen_corpus(&cfg.corpus, &dir)?;
    }
    let prep = Prepared::open(&cfg, cfg.stft)?;
    let data = prep.train_set()?;
    let theta = pipeline::train(&cfg, &cfg.model, &data, &mut |line| println!("{line}"))?;
    let report = prep.evaluate(&cfg, &cfg.model, &theta)?;
    println!("trained and evaluated in {:.0?}", start.elapsed());

    for s in &report.speakers {
        println!(
            "{}: noisy {:.2} dB, unadapted {:.2} dB, adapted {:.2} dB (delta {:+.3})",
            s.speaker_id, s.noisy.si_sdr, s.unadapted.si_sdr, s.adapted.si_sdr, s.delta.si_sdr
        );
    }
    if let (Some(n), Some(a), Some(d)) = (report.mean_noisy, report.mean_adapted, report.mean_delta) {
        println!("mean SI-SDR gain over noisy {:.2} dB, adaptation delta {:+.3} dB", a.si_sdr - n.si_sdr, d.si_sdr);
    }

    let rows = prep.corpus.manifest.speakers.iter().map(|s| (s.speaker_id.as_str(), s.gender.as_str(), &prep.embeddings[&s.speaker_id]));
    let csv = export_masks(&theta, rows)?;
    println!("mask rows:");
    for line in csv.lines() {
        let f: Vec<&str> = line.splitn(4, ',').collect();
        println!("  {} {} {} ...", f[0], f[1], f[2]);
    }
    Ok(())
}
