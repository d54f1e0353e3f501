use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::ptr;
use std::sync::OnceLock;

use clforge::config::{ExperimentConfig, SuiteRef};
use clforge::experiment;
use clforge::taskgen::{default_suite, SplitCounts, SuiteName, TaskData};
use clforge::trainer::{ContinualState, Mode};
use clforge_ffi::*;

struct Run {
    _dir: tempfile::TempDir,
    ckpt: PathBuf,
    state: ContinualState,
    tasks: Vec<TaskData>,
}

/// A tiny two-task run checkpointed to disk.
fn run() -> &'static Run {
    static CELL: OnceLock<Run> = OnceLock::new();
    CELL.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ExperimentConfig::new(SuiteRef::Named(SuiteName::Heterogeneous), Mode::Full);
        cfg.pretrain.steps = 60;
        cfg.pretrain.lr = 5e-3;
        cfg.pretrain.batch_size = 8;
        cfg.pretrain.val_size = 16;
        cfg.train.max_epochs = 2;
        cfg.train.batch_size = 8;
        let specs: Vec<_> = default_suite(SuiteName::Heterogeneous)
            .into_iter()
            .take(2)
            .map(|mut s| {
                s.counts = SplitCounts { train: 16, val: 8, test: 8 };
                s
            })
            .collect();
        let tasks: Vec<TaskData> = specs.iter().map(|s| clforge::taskgen::generate(s).unwrap()).collect();
        let model = experiment::pretrained_model(&cfg, dir.path()).unwrap();
        let seed_dir = dir.path().join("seed");
        let (out, _) = experiment::run_seed(&model, &tasks, &cfg, Mode::Full, 7, &seed_dir).unwrap();
        Run {
            ckpt: seed_dir.join("state.ckpt"),
            _dir: dir,
            state: out.state,
            tasks,
        }
    })
}

struct Handle(*mut ClforgeState);

impl Drop for Handle {
    fn drop(&mut self) {
        unsafe { clforge_state_free(self.0) }
    }
}

fn load() -> Handle {
    let path = CString::new(run().ckpt.to_str().unwrap()).unwrap();
    let mut h = ptr::null_mut();
    let st = unsafe { clforge_state_load(path.as_ptr(), &mut h) };
    assert_eq!(st, ClforgeStatus::Ok, "{}", last_error());
    assert!(!h.is_null());
    Handle(h)
}

fn last_error() -> String {
    let p = clforge_last_error();
    if p.is_null() {
        String::new()
    } else {
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }
}

#[test]
fn counts_and_results_match_the_library() {
    let r = run();
    let h = load();
    let mut n = 0usize;
    assert_eq!(unsafe { clforge_state_num_tasks(h.0, &mut n) }, ClforgeStatus::Ok);
    assert_eq!(n, r.state.t_current());
    assert_eq!(unsafe { clforge_state_num_adapters(h.0, &mut n) }, ClforgeStatus::Ok);
    assert_eq!(n, r.state.bank.adapters.len());
    for task in 0..2 {
        let mut a = usize::MAX;
        assert_eq!(unsafe { clforge_state_task_adapter(h.0, task, &mut a) }, ClforgeStatus::Ok);
        assert_eq!(a, r.state.bank.task_assignment[&task]);
    }
    let mut v = 0.0;
    assert_eq!(unsafe { clforge_state_result(h.0, 1, 0, &mut v) }, ClforgeStatus::Ok);
    assert_eq!(v.to_bits(), r.state.results.get(1, 0).unwrap().to_bits());
    assert_eq!(unsafe { clforge_state_result(h.0, 0, 1, &mut v) }, ClforgeStatus::OutOfRange);
    assert!(last_error().contains("stage 0"), "{}", last_error());
    assert_eq!(unsafe { clforge_state_forgetting(h.0, &mut v) }, ClforgeStatus::Ok);
    assert_eq!(v, clforge::metrics::forgetting_rate(&r.state.results).unwrap().average);
}

#[test]
fn predict_matches_forward() {
    let r = run();
    let h = load();
    let sample = &r.tasks[1].test[0];
    let mut probs = vec![0.0; CLFORGE_IMAGE_LEN];
    let st = unsafe { clforge_state_predict(h.0, 1, sample.image.data().as_ptr(), probs.as_mut_ptr(), CLFORGE_IMAGE_LEN) };
    assert_eq!(st, ClforgeStatus::Ok, "{}", last_error());
    let rec = &r.state.records[1];
    let logits = r
        .state
        .model
        .forward(&sample.image, &rec.prompt, r.state.bank.adapters.get(&rec.adapter))
        .unwrap();
    for (p, z) in probs.iter().zip(logits.data()) {
        assert!((p - 1.0 / (1.0 + (-z).exp())).abs() < 1e-15);
    }
    let st = unsafe { clforge_state_predict(h.0, 1, sample.image.data().as_ptr(), probs.as_mut_ptr(), 10) };
    assert_eq!(st, ClforgeStatus::InvalidArgument);
    let st = unsafe { clforge_state_predict(h.0, 9, sample.image.data().as_ptr(), probs.as_mut_ptr(), CLFORGE_IMAGE_LEN) };
    assert_eq!(st, ClforgeStatus::OutOfRange);
}

#[test]
fn allocation_query_agrees_with_the_library() {
    let r = run();
    let h = load();
    let prompt = r.state.records[0].prompt.clone();
    let c = CString::new(prompt.clone()).unwrap();
    let mut a = ClforgeAllocation::default();
    assert_eq!(unsafe { clforge_state_allocate(h.0, c.as_ptr(), 0.75, &mut a) }, ClforgeStatus::Ok);
    // the exact prompt of task 0 has similarity 1 with itself
    assert_eq!(a.reuse, 1);
    assert_eq!(a.task, 0);
    assert!((a.similarity - 1.0).abs() < 1e-12);

    let mut s = 0.0;
    let other = CString::new(r.state.records[1].prompt.clone()).unwrap();
    assert_eq!(
        unsafe { clforge_state_similarity(h.0, c.as_ptr(), other.as_ptr(), &mut s) },
        ClforgeStatus::Ok
    );
    let m = &r.state.model;
    let expect = clforge::adapters::cosine_similarity(&m.embed_text(&prompt).unwrap(), &m.embed_text(&r.state.records[1].prompt).unwrap()).unwrap();
    assert_eq!(s, expect);

    assert_eq!(
        unsafe { clforge_state_allocate(h.0, c.as_ptr(), 1.0, &mut a) },
        ClforgeStatus::InvalidArgument
    );
}

#[test]
fn bad_inputs_report_status_and_message() {
    let mut h = ptr::null_mut();
    let missing = CString::new("/nonexistent/state.ckpt").unwrap();
    assert_eq!(unsafe { clforge_state_load(missing.as_ptr(), &mut h) }, ClforgeStatus::Io);
    assert!(h.is_null());
    assert!(!last_error().is_empty());

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = CString::new(junk.to_str().unwrap()).unwrap();
    assert_eq!(unsafe { clforge_state_load(junk.as_ptr(), &mut h) }, ClforgeStatus::Format);

    assert_eq!(unsafe { clforge_state_load(ptr::null(), &mut h) }, ClforgeStatus::NullPointer);
    let mut n = 0;
    assert_eq!(unsafe { clforge_state_num_tasks(ptr::null(), &mut n) }, ClforgeStatus::NullPointer);
    unsafe { clforge_state_free(ptr::null_mut()) };

    // a success clears the previous message
    let mut v = 0.0;
    assert_eq!(unsafe { clforge_difficulty_weight(0.5, 1.0, &mut v) }, ClforgeStatus::Ok);
    assert!(clforge_last_error().is_null());
}

#[test]
fn pure_helpers() {
    let mut v = 0.0;
    let pred = [1.0, 1.0, 0.0, 0.0];
    let gt = [1.0, 0.0, 1.0, 0.0];
    assert_eq!(unsafe { clforge_dice(pred.as_ptr(), gt.as_ptr(), 4, &mut v) }, ClforgeStatus::Ok);
    assert!((v - 0.5).abs() < 1e-12);
    assert_eq!(unsafe { clforge_replay_weight(1, 3, 0.0, 1.0, &mut v) }, ClforgeStatus::Ok);
    assert_eq!(v, clforge::memory::replay_weight(1, 3, 0.0, 1.0).unwrap());
    assert_eq!(unsafe { clforge_difficulty_weight(0.1, 1.0, &mut v) }, ClforgeStatus::Ok);
    assert_eq!(v, clforge::consolidation::difficulty_weight(0.1, 1.0).unwrap());
    assert_eq!(unsafe { clforge_difficulty_weight(0.1, -1.0, &mut v) }, ClforgeStatus::InvalidArgument);
    let version = unsafe { CStr::from_ptr(clforge_version()) };
    assert_eq!(version.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(concat!(env!("CARGO_MANIFEST_DIR"), "/include/clforge.h")).unwrap();
    for name in [
        "clforge_last_error",
        "clforge_version",
        "clforge_state_load",
        "clforge_state_free",
        "clforge_state_num_tasks",
        "clforge_state_num_adapters",
        "clforge_state_task_adapter",
        "clforge_state_predict",
        "clforge_state_result",
        "clforge_state_forgetting",
        "clforge_state_similarity",
        "clforge_state_allocate",
        "clforge_dice",
        "clforge_replay_weight",
        "clforge_difficulty_weight",
        "CLFORGE_STATUS_OUT_OF_RANGE",
        "CLFORGE_IMAGE_LEN",
    ] {
        assert!(header.contains(name), "header lacks {name}");
    }
}
