//! Placement and training-technique ablations at smoke-test scale.

use ossem::config::RunConfig;
use ossem::corpus::gen_corpus;
use ossem::pipeline::{ablate_placement, ablate_techniques, Prepared};

fn main() -> ossem::Result<()> {
    let dir = tempfile::tempdir()?;
    let cfg = RunConfig { corpus_dir: dir.path().to_path_buf(), ..RunConfig::micro() }.resolve()?;
    gen_corpus(&cfg.corpus, &cfg.corpus_dir)?;
    let prep = Prepared::open(&cfg, cfg.stft)?;
    let mut quiet = |_: String| {};
    println!("{}", ablate_placement(&cfg, &prep, &mut quiet)?.to_markdown());
    println!("{}", ablate_techniques(&cfg, &prep, &mut quiet)?.to_markdown());
    Ok(())
}
