//! Generates a small synthetic corpus and scores its noisy mixtures.

use ossem::corpus::{gen_corpus, si_sdr, seg_snr, Corpus, CorpusConfig, Split};

fn main() -> ossem::Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = CorpusConfig { n_speakers: 3, n_test_speakers: 1, utts_per_speaker: 4, ..CorpusConfig::default() };
    let manifest = gen_corpus(&cfg, dir.path())?;
    let corpus = Corpus::open(dir.path())?;
    for s in &manifest.speakers {
        println!("{} {} f0 {:.0}-{:.0} Hz", s.speaker_id, s.gender.as_str(), s.f0_range.0, s.f0_range.1);
    }
    for rec in manifest.utterances.iter().filter(|r| r.split != Split::Train) {
        let (noisy, clean) = corpus.read_pair(rec)?;
        println!(
            "{} {:?} {:<6} {:>4} dB  si-sdr {:6.2}  seg-snr {:6.2}",
            rec.utt_id,
            rec.split,
            rec.noise_type.as_str(),
            rec.snr_db,
            si_sdr(&noisy, &clean)?,
            seg_snr(&noisy, &clean, 256)?
        );
    }
    Ok(())
}
