//! Runs every Rust code block in the guide as a doctest, keeping the book
//! and the library in lockstep. Chapters live in `book/src/`.

macro_rules! chapter {
    ($name:ident, $path:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $path))]
        mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(waveforms, "waveforms.md");
chapter!(graph, "graph.md");
chapter!(features, "features.md");
chapter!(ctc, "ctc.md");
chapter!(transcriber, "transcriber.md");
chapter!(attacks, "attacks.md");
chapter!(refinements, "refinements.md");
chapter!(robustness, "robustness.md");
chapter!(cli, "cli.md");
