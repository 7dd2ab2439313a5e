//! The chapters of `book/` as doc comments, so `cargo test` compiles and
//! runs every Rust snippet in the guide.

macro_rules! chapter {
    ($name:ident, $file:literal) => {
        #[doc = include_str!(concat!("../../../book/src/", $file))]
        pub mod $name {}
    };
}

chapter!(introduction, "introduction.md");
chapter!(geometry, "geometry.md");
chapter!(sparse, "sparse.md");
chapter!(heading, "heading.md");
chapter!(free_space, "free_space.md");
chapter!(pose_alignment, "pose_alignment.md");
chapter!(temporal, "temporal.md");
chapter!(spatial, "spatial.md");
chapter!(cpm, "cpm.md");
chapter!(simulation, "simulation.md");
