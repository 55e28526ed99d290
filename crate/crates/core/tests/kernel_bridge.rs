//! The native kernel is an external executable; these tests stand in for it
//! with small shell scripts that honour the same command line and exit codes.
#![cfg(unix)]

use std::fs;
use std::os::unix::fs::PermissionsExt;
use std::path::{Path, PathBuf};

use ndarray::array;
use reid_core::eval::format::{read_embeddings, write_embeddings};
use reid_core::eval::{evaluate_sets, EmbeddingSet, NativeKernel};
use reid_core::ReidError;

const ARG_LOOP: &str = r#"
while [ $# -gt 0 ]; do
  case "$1" in
    --query) q="$2"; shift 2 ;;
    --gallery) g="$2"; shift 2 ;;
    --topk) k="$2"; shift 2 ;;
    --out) o="$2"; shift 2 ;;
    *) echo "unknown argument $1" >&2; exit 64 ;;
  esac
done
"#;

fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, format!("#!/bin/sh\n{ARG_LOOP}\n{body}\n")).unwrap();
    fs::set_permissions(&path, fs::Permissions::from_mode(0o755)).unwrap();
    path
}

fn sets() -> (EmbeddingSet, EmbeddingSet) {
    let q = EmbeddingSet::new(array![[1.0, 0.0], [0.0, 1.0]], vec![1, 2], vec![1, 1]).unwrap();
    let g = EmbeddingSet::new(
        array![[0.9, 0.1], [0.1, 0.9], [0.5, 0.5], [1.0, 0.0]],
        vec![1, 2, 3, -1],
        vec![2, 2, 2, 3],
    )
    .unwrap();
    (q, g)
}

#[test]
fn success_report_is_parsed_and_arguments_are_passed() {
    let dir = tempfile::tempdir().unwrap();
    let args = dir.path().join("args");
    let body = format!(
        r#"[ "$(head -c 8 "$q")" = REIDEMB1 ] || exit 2
[ "$(head -c 8 "$g")" = REIDEMB1 ] || exit 2
echo "$k" > "{}"
printf '{{"rank":{{"1":1.0,"5":1.0,"20":1.0}},"map":1.0}}' > "$o""#,
        args.display()
    );
    let kernel = NativeKernel::new(script(dir.path(), "ok.sh", &body));
    let (q, g) = sets();
    let native = kernel.evaluate(&q, &g, &[1, 5]).unwrap();
    assert_eq!(fs::read_to_string(&args).unwrap().trim(), "1,5,20");
    let reference = evaluate_sets(&q, &g, &[1, 5], None).unwrap();
    assert_eq!(
        (native.rank1, native.rank20, native.map),
        (reference.rank1, reference.rank20, reference.map)
    );
    assert_eq!(native.cmc.keys().copied().collect::<Vec<_>>(), [1, 5]);
}

#[test]
fn exit_codes_map_to_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (q, g) = sets();
    let run = |code: i32| {
        let path = script(
            dir.path(),
            &format!("exit{code}.sh"),
            &format!("echo failing >&2\nexit {code}"),
        );
        NativeKernel::new(path).evaluate(&q, &g, &[1]).unwrap_err()
    };
    assert!(matches!(run(2), ReidError::BadMagic { .. }));
    assert!(matches!(run(3), ReidError::DimMismatch(_)));
    assert!(matches!(run(4), ReidError::NoValidQueries));
    assert!(matches!(run(1), ReidError::Kernel(_)));
    for code in 2..=4 {
        assert_eq!(run(code).exit_code(), code);
    }
}

#[test]
fn malformed_output_is_a_format_error() {
    let dir = tempfile::tempdir().unwrap();
    let (q, g) = sets();
    let bad = script(dir.path(), "bad.sh", r#"printf '{"rank":{"1":0.5},"map":0.5}' > "$o""#);
    assert!(matches!(
        NativeKernel::new(bad).evaluate(&q, &g, &[1]),
        Err(ReidError::Format(_))
    ));
}

#[test]
fn files_handed_to_the_kernel_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let keep = dir.path().join("kept.emb");
    let kernel = NativeKernel::new(script(
        dir.path(),
        "copy.sh",
        &format!(
            "cp \"$q\" \"{}\"\nprintf '{{\"rank\":{{\"1\":0.5,\"20\":1}},\"map\":0.5}}' > \"$o\"",
            keep.display()
        ),
    ));
    let (q, g) = sets();
    kernel.evaluate(&q, &g, &[1]).unwrap();
    let back = read_embeddings(&keep).unwrap();
    assert_eq!(back.person_ids, q.person_ids);
    assert_eq!(back.camera_ids, q.camera_ids);
    assert_eq!(back.vectors, q.vectors);

    // A query file written here and a gallery of another width: the kernel would refuse it.
    let wide = EmbeddingSet::new(array![[1.0, 0.0, 0.0]], vec![1], vec![2]).unwrap();
    let path = dir.path().join("wide.emb");
    write_embeddings(&path, &wide).unwrap();
    assert_eq!(read_embeddings(&path).unwrap().dim(), 3);
    assert!(matches!(
        evaluate_sets(&q, &wide, &[1], None),
        Err(ReidError::DimMismatch(_))
    ));
}
