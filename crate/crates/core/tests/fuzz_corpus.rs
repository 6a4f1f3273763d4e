use std::fs;
use std::path::Path;

use ctxemo::fuzzing::TARGETS;

#[test]
fn corpus_seeds_replay_cleanly() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus");
    for (name, body) in TARGETS {
        let dir = root.join(name);
        let seeds: Vec<_> = fs::read_dir(&dir)
            .unwrap_or_else(|e| panic!("{}: {e}", dir.display()))
            .map(|e| e.unwrap().path())
            .collect();
        assert!(!seeds.is_empty(), "no seeds for {name}");
        for seed in seeds {
            body(&fs::read(&seed).unwrap());
        }
    }
}

#[test]
fn hostile_inputs_do_not_panic() {
    let inputs: [&[u8]; 6] = [
        b"",
        b"\xff\xfe\x00",
        b"CTXEMOCK\x01\x00\x00\x00\xff\xff\xff\xff",
        b"{\"task\":\"multi_label\",\"num_classes\":18446744073709551615,\"class_names\":[]}\n",
        b"[[[[[[[[[[[[[[[[[[[[[[[[[[[[[[[[[[[[[[[[",
        b"profile = \"bold-like\"\nframes = 0\n",
    ];
    for (_, body) in TARGETS {
        for input in inputs {
            body(input);
        }
    }
}
