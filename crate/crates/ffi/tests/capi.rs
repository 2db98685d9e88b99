use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use spikebert::data::{synth_dataset, synth_vocab};
use spikebert::model::{write_checkpoint, Checkpoint, ModelConfig, SpikeBert, TokenBatch};
use spikebert::teacher_io::{write_dump, DumpKind, SyntheticTeacher};
use spikebert_ffi::*;

fn cpath(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    let p = sb_last_error_message();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

fn model_file(dir: &Path) -> (SpikeBert, std::path::PathBuf) {
    let vocab = synth_vocab(40).unwrap();
    let model = SpikeBert::new(ModelConfig::desk(vocab.len(), 2), 9).unwrap();
    let path = dir.join("m.ckpt");
    write_checkpoint(&Checkpoint::from_model(&model), &path).unwrap();
    // Round through the f32 file so both sides use identical weights.
    let model = spikebert::model::read_checkpoint(&path).unwrap().into_model().unwrap();
    (model, path)
}

#[test]
fn model_predictions_match_the_library() {
    let tmp = tempfile::tempdir().unwrap();
    let (model, path) = model_file(tmp.path());
    let mut samples = synth_dataset(6, 40, 2).unwrap();
    let vocab = synth_vocab(40).unwrap();
    spikebert::data::encode_all(&mut samples, &vocab, 16);
    let batch = TokenBatch::from_rows(samples.iter().map(|s| s.token_ids.as_slice())).unwrap();
    let expected = model.predict(&batch).unwrap();
    let ids: Vec<u32> = samples.iter().flat_map(|s| s.token_ids.clone()).collect();
    let seq_len = samples[0].token_ids.len();

    let mut handle = ptr::null_mut();
    let c = cpath(&path);
    assert_eq!(unsafe { sb_model_load(c.as_ptr(), &mut handle) }, SbStatus::Ok);
    assert!(sb_last_error_message().is_null());
    assert_eq!(unsafe { sb_model_num_classes(handle) }, 2);
    assert_eq!(unsafe { sb_model_max_len(handle) }, 16);

    let mut labels = vec![99u32; 6];
    let s = unsafe { sb_model_predict(handle, ids.as_ptr(), 6, seq_len, labels.as_mut_ptr()) };
    assert_eq!(s, SbStatus::Ok);
    assert_eq!(labels, expected.iter().map(|&l| l as u32).collect::<Vec<_>>());

    let mut logits = vec![0f32; 12];
    let s = unsafe { sb_model_logits(handle, ids.as_ptr(), 6, seq_len, logits.as_mut_ptr(), 12) };
    assert_eq!(s, SbStatus::Ok);
    let want = model.forward(&batch).unwrap().logits.data;
    for (a, b) in logits.iter().zip(&want) {
        assert!((*a as f64 - b).abs() < 1e-5);
    }
    let s = unsafe { sb_model_logits(handle, ids.as_ptr(), 6, seq_len, logits.as_mut_ptr(), 11) };
    assert_eq!(s, SbStatus::InvalidArgument);

    let bytes = std::fs::read(&path).unwrap();
    let mut again = ptr::null_mut();
    assert_eq!(unsafe { sb_model_from_bytes(bytes.as_ptr(), bytes.len(), &mut again) }, SbStatus::Ok);
    unsafe {
        sb_model_free(handle);
        sb_model_free(again);
        sb_model_free(ptr::null_mut());
    }
}

#[test]
fn bad_inputs_report_status_and_message() {
    let tmp = tempfile::tempdir().unwrap();
    let (_, path) = model_file(tmp.path());
    let mut handle = ptr::null_mut();
    let missing = cpath(&tmp.path().join("missing.ckpt"));
    assert_eq!(unsafe { sb_model_load(missing.as_ptr(), &mut handle) }, SbStatus::Io);
    assert!(handle.is_null());
    assert!(!last_error().is_empty());

    assert_eq!(unsafe { sb_model_load(ptr::null(), &mut handle) }, SbStatus::NullPointer);
    let junk = b"not a checkpoint";
    assert_eq!(unsafe { sb_model_from_bytes(junk.as_ptr(), junk.len(), &mut handle) }, SbStatus::Format);

    let c = cpath(&path);
    assert_eq!(unsafe { sb_model_load(c.as_ptr(), &mut handle) }, SbStatus::Ok);
    let ids = [9999u32; 4];
    let mut out = [0u32; 1];
    let s = unsafe { sb_model_predict(handle, ids.as_ptr(), 1, 4, out.as_mut_ptr()) };
    assert_eq!(s, SbStatus::InvalidArgument);
    assert!(last_error().contains("9999"), "{}", last_error());
    assert_eq!(unsafe { sb_model_num_classes(ptr::null()) }, 0);
    unsafe { sb_model_free(handle) };
}

#[test]
fn dump_header_and_logits_are_exposed() {
    let tmp = tempfile::tempdir().unwrap();
    let vocab = synth_vocab(40).unwrap();
    let mut samples = synth_dataset(5, 40, 1).unwrap();
    spikebert::data::encode_all(&mut samples, &vocab, 16);
    let teacher = SyntheticTeacher {
        layers: 3,
        dim: 8,
        num_classes: 2,
        seed: 4,
    };
    for (kind, name) in [(DumpKind::Task, "t.sbtd"), (DumpKind::Features, "f.sbtd")] {
        let dump = teacher.generate(&samples, &vocab, kind).unwrap();
        write_dump(&dump, &tmp.path().join(name)).unwrap();
    }

    let mut d = ptr::null_mut();
    let c = cpath(&tmp.path().join("t.sbtd"));
    assert_eq!(unsafe { sb_dump_open(c.as_ptr(), &mut d) }, SbStatus::Ok);
    let mut info = SbDumpInfo::default();
    assert_eq!(unsafe { sb_dump_info(d, &mut info) }, SbStatus::Ok);
    assert_eq!((info.kind, info.layers, info.dim, info.max_len), (1, 3, 8, 16));
    assert_eq!((info.num_classes, info.records), (2, 5));
    assert_eq!(info.vocab_hash, vocab.hash());
    assert_eq!(info.pad_id, vocab.pad_id() as i32);
    let mut logits = [0f32; 2];
    assert_eq!(unsafe { sb_dump_logits(d, 0, logits.as_mut_ptr(), 2) }, SbStatus::Ok);
    assert!(logits.iter().any(|&v| v != 0.0));
    assert_eq!(unsafe { sb_dump_logits(d, 5, logits.as_mut_ptr(), 2) }, SbStatus::InvalidArgument);
    unsafe { sb_dump_free(d) };

    let c = cpath(&tmp.path().join("f.sbtd"));
    assert_eq!(unsafe { sb_dump_open(c.as_ptr(), &mut d) }, SbStatus::Ok);
    assert_eq!(unsafe { sb_dump_logits(d, 0, logits.as_mut_ptr(), 2) }, SbStatus::Data);
    unsafe { sb_dump_free(d) };

    let bytes = std::fs::read(tmp.path().join("t.sbtd")).unwrap();
    std::fs::write(tmp.path().join("cut.sbtd"), &bytes[..bytes.len() - 1]).unwrap();
    let c = cpath(&tmp.path().join("cut.sbtd"));
    assert_eq!(unsafe { sb_dump_open(c.as_ptr(), &mut d) }, SbStatus::Format);
}

#[test]
fn energy_helpers_follow_the_counting_rules() {
    // 4.6 pJ per MAC: 1e9 MACs is 4.6 mJ.
    assert!((sb_ann_energy_mj(1e9) - 4.6).abs() < 1e-12);
    let mut sops = 0u64;
    assert_eq!(unsafe { sb_sops(1000, 0.25, 4, &mut sops) }, SbStatus::Ok);
    assert_eq!(sops, 1000);
    assert_eq!(unsafe { sb_sops(1000, 1.5, 4, &mut sops) }, SbStatus::InvalidArgument);
    assert_eq!(unsafe { sb_sops(1000, 0.5, 4, ptr::null_mut()) }, SbStatus::NullPointer);
}

#[test]
fn vocab_hash_matches_the_vocabulary() {
    let vocab = synth_vocab(12).unwrap();
    let owned: Vec<CString> = vocab.tokens().iter().map(|t| CString::new(t.as_str()).unwrap()).collect();
    let ptrs: Vec<_> = owned.iter().map(|c| c.as_ptr()).collect();
    let mut h = 0u64;
    assert_eq!(unsafe { sb_vocab_hash(ptrs.as_ptr(), ptrs.len(), &mut h) }, SbStatus::Ok);
    assert_eq!(h, vocab.hash());
    let v = unsafe { CStr::from_ptr(sb_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_the_whole_api() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/spikebert.h")).unwrap();
    for name in [
        "sb_last_error_message",
        "sb_version",
        "sb_model_load",
        "sb_model_from_bytes",
        "sb_model_free",
        "sb_model_num_classes",
        "sb_model_max_len",
        "sb_model_logits",
        "sb_model_predict",
        "sb_dump_open",
        "sb_dump_free",
        "sb_dump_info",
        "sb_dump_logits",
        "sb_ann_energy_mj",
        "sb_sops",
        "sb_vocab_hash",
        "typedef struct SbModel SbModel",
        "SB_STATUS_OK = 0",
    ] {
        assert!(header.contains(name), "{name} missing from header");
    }
}

#[test]
fn c_program_links_against_the_static_library() {
    let Ok(cc) = std::process::Command::new("cc").arg("--version").output() else {
        eprintln!("no C compiler on PATH; skipping");
        return;
    };
    assert!(cc.status.success());
    let exe = std::env::current_exe().unwrap();
    let profile_dir = exe.parent().unwrap().parent().unwrap();
    let lib = profile_dir.join("libspikebert_ffi.a");
    assert!(lib.is_file(), "{} not built", lib.display());
    let manifest = Path::new(env!("CARGO_MANIFEST_DIR"));
    let out = Path::new(env!("CARGO_TARGET_TMPDIR")).join("sb_smoke");
    let status = std::process::Command::new("cc")
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(manifest.join("include"))
        .arg(manifest.join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&out)
        .status()
        .unwrap();
    assert!(status.success(), "C compile failed");
    let run = std::process::Command::new(&out).output().unwrap();
    assert!(run.status.success(), "C smoke exited with {:?}", run.status.code());
    assert_eq!(String::from_utf8_lossy(&run.stdout).trim(), "ok");
}
