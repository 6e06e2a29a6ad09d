//! Runs every example program and checks it exits cleanly.

use std::process::Command;

fn run_example(name: &str) {
    let out = Command::new(env!("CARGO"))
        .args(["run", "--quiet", "--offline", "-p", "turbmend", "--example", name])
        .output()
        .expect("cargo runs");
    assert!(out.status.success(), "{name} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    assert!(!out.stdout.is_empty(), "{name} printed nothing");
}

macro_rules! example_tests {
    ($($name:ident),* $(,)?) => {
        $(
            #[test]
            fn $name() {
                run_example(stringify!($name));
            }
        )*
    };
}

example_tests!(
    grid_operators,
    nltv_graph,
    rpca_reference,
    register_frames,
    mixed_rof,
    fuse_sequence,
    blind_deconv,
    simulate_turbulence,
    image_metrics,
    restore_sequence,
);
