use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use posg::corpus::{build_lexicon, generate_synthetic_corpus, SyntheticGrammar, BUNDLED_GRAMMAR};
use posg::net::save_checkpoint;
use posg::{HeadKind, ModelConfig, ModelParams};
use posg_ffi::*;

fn cstr(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let mut buf = vec![0 as std::ffi::c_char; 256];
    unsafe { posg_last_error(buf.as_mut_ptr(), buf.len()) };
    unsafe { CStr::from_ptr(buf.as_ptr()) }.to_string_lossy().into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    checkpoint: CString,
    lexicon: CString,
}

fn fixture(head: HeadKind) -> Fixture {
    let grammar = SyntheticGrammar::from_toml(BUNDLED_GRAMMAR).unwrap();
    let corpus = generate_synthetic_corpus(&grammar, 20, 1);
    let lexicon = build_lexicon(&corpus, 10_000, 1).unwrap();
    let mut config = ModelConfig::desk_scale(lexicon.vocab.len(), lexicon.inventory.len());
    config.n_layers = 1;
    config.d_model = 16;
    config.d_ff = 32;
    config.context_len = 16;
    let params = ModelParams::init(&config);
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("m.ckpt");
    let lex = dir.path().join("lexicon.json");
    std::fs::write(&ckpt, save_checkpoint(&params, &config, head)).unwrap();
    std::fs::write(&lex, lexicon.to_json()).unwrap();
    Fixture {
        checkpoint: cstr(ckpt.to_str().unwrap()),
        lexicon: cstr(lex.to_str().unwrap()),
        _dir: dir,
    }
}

fn load(f: &Fixture) -> *mut PosgModel {
    let mut model = ptr::null_mut();
    let status = unsafe { posg_model_load(f.checkpoint.as_ptr(), f.lexicon.as_ptr(), &mut model) };
    assert_eq!(status, PosgStatus::Ok, "{}", last_error());
    model
}

fn sampler(pos: &str, token: &str, seed: u64) -> *mut PosgSampler {
    let mut s = ptr::null_mut();
    let (p, t) = (cstr(pos), cstr(token));
    assert_eq!(unsafe { posg_sampler_new(p.as_ptr(), t.as_ptr(), seed, &mut s) }, PosgStatus::Ok);
    s
}

fn run(model: *const PosgModel, s: *const PosgSampler, len: usize) -> (Vec<usize>, Vec<usize>) {
    let prefix = [1usize];
    let mut tokens = vec![usize::MAX; len];
    let mut pos = vec![usize::MAX; len];
    let mut written = 0;
    let status = unsafe {
        posg_generate(model, s, prefix.as_ptr(), 1, len, tokens.as_mut_ptr(), pos.as_mut_ptr(), len, &mut written)
    };
    assert_eq!(status, PosgStatus::Ok, "{}", last_error());
    assert_eq!(written, len);
    (tokens, pos)
}

#[test]
fn load_query_generate_free() {
    let f = fixture(HeadKind::Posg);
    let model = load(&f);
    let vocab = unsafe { posg_model_vocab_size(model) };
    assert!(vocab > 4);
    assert!(unsafe { posg_model_pos_count(model) } > 1);
    assert_eq!(unsafe { posg_model_is_posg(model) }, 1);

    let s = sampler("top_k:5", "nucleus:0.5", 7);
    let (a, pos) = run(model, s, 12);
    let (b, _) = run(model, s, 12);
    assert_eq!(a, b, "same seed, same output");
    assert!(a.iter().all(|&t| t < vocab));
    assert!(pos.iter().all(|&r| r < unsafe { posg_model_pos_count(model) }));

    let mut ppl = 0.0;
    assert_eq!(unsafe { posg_perplexity(model, a.as_ptr(), a.len(), &mut ppl) }, PosgStatus::Ok);
    assert!(ppl.is_finite() && ppl > 1.0);

    unsafe {
        posg_sampler_free(s);
        posg_model_free(model);
    }
}

#[test]
fn control_and_token_lookup() {
    let f = fixture(HeadKind::Posg);
    let model = load(&f);
    let s = sampler("pure", "pure", 0);
    let tag = cstr("JJ");
    assert_eq!(unsafe { posg_sampler_set_control(s, model, tag.as_ptr(), 10.0) }, PosgStatus::Ok);
    let bogus = cstr("NOT_A_TAG");
    assert_eq!(
        unsafe { posg_sampler_set_control(s, model, bogus.as_ptr(), 2.0) },
        PosgStatus::InvalidArgument
    );
    assert!(last_error().contains("unknown tag"));

    let mut id = 0;
    let word = cstr("zzz-not-a-word");
    assert_eq!(unsafe { posg_model_token_id(model, word.as_ptr(), &mut id) }, PosgStatus::Ok);
    assert_eq!(id, 0);
    unsafe {
        posg_sampler_free(s);
        posg_model_free(model);
    }
}

#[test]
fn mle_model_leaves_pos_buffer_untouched() {
    let f = fixture(HeadKind::Mle);
    let model = load(&f);
    assert_eq!(unsafe { posg_model_is_posg(model) }, 0);
    let s = sampler("pure", "top_k:3", 3);
    let (tokens, pos) = run(model, s, 5);
    assert!(tokens.iter().all(|&t| t != usize::MAX));
    assert!(pos.iter().all(|&r| r == usize::MAX));
    unsafe {
        posg_sampler_free(s);
        posg_model_free(model);
    }
}

#[test]
fn error_codes() {
    let mut model = ptr::null_mut();
    let missing = cstr("/nonexistent/model.ckpt");
    assert_eq!(
        unsafe { posg_model_load(missing.as_ptr(), missing.as_ptr(), &mut model) },
        PosgStatus::Io
    );
    assert!(model.is_null());
    assert!(!last_error().is_empty());
    assert_eq!(
        unsafe { posg_model_load(ptr::null(), missing.as_ptr(), &mut model) },
        PosgStatus::NullPointer
    );

    let dir = tempfile::tempdir().unwrap();
    let junk = dir.path().join("junk.ckpt");
    std::fs::write(&junk, b"not a checkpoint").unwrap();
    let junk = cstr(junk.to_str().unwrap());
    assert_eq!(unsafe { posg_model_load(junk.as_ptr(), junk.as_ptr(), &mut model) }, PosgStatus::Data);

    let mut s = ptr::null_mut();
    let (bad, ok) = (cstr("top_k:0"), cstr("pure"));
    assert_eq!(
        unsafe { posg_sampler_new(bad.as_ptr(), ok.as_ptr(), 0, &mut s) },
        PosgStatus::InvalidArgument
    );

    let f = fixture(HeadKind::Posg);
    let model = load(&f);
    let s = sampler("pure", "pure", 0);
    let prefix = [1usize];
    let mut out = [0usize; 2];
    let mut written = 0;
    let status = unsafe {
        posg_generate(model, s, prefix.as_ptr(), 1, 5, out.as_mut_ptr(), ptr::null_mut(), 2, &mut written)
    };
    assert_eq!(status, PosgStatus::BufferTooSmall);
    let status = unsafe {
        posg_generate(model, s, prefix.as_ptr(), 0, 2, out.as_mut_ptr(), ptr::null_mut(), 2, &mut written)
    };
    assert_eq!(status, PosgStatus::InvalidArgument, "empty prefix");
    let bad_tokens = [usize::MAX];
    let mut ppl = 0.0;
    assert_eq!(
        unsafe { posg_perplexity(model, bad_tokens.as_ptr(), 1, &mut ppl) },
        PosgStatus::InvalidArgument
    );
    assert_eq!(unsafe { posg_model_vocab_size(ptr::null()) }, 0);
    assert_eq!(unsafe { posg_model_is_posg(ptr::null()) }, -1);
    unsafe {
        posg_sampler_free(s);
        posg_model_free(model);
        posg_model_free(ptr::null_mut());
        posg_sampler_free(ptr::null_mut());
    }
}

#[test]
fn entropy_topk_closed_form() {
    let p = [0.25; 4];
    let mut h = 0.0;
    assert_eq!(unsafe { posg_entropy_topk(p.as_ptr(), 4, 2, &mut h) }, PosgStatus::Ok);
    assert!((h - 2f64.ln()).abs() < 1e-12);
    let unnormalized = [0.5, 0.6];
    assert_eq!(
        unsafe { posg_entropy_topk(unnormalized.as_ptr(), 2, 1, &mut h) },
        PosgStatus::InvalidArgument
    );
}

#[test]
fn version_and_error_buffer() {
    let v = unsafe { CStr::from_ptr(posg_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
    let mut s = ptr::null_mut();
    let bad = cstr("nope");
    unsafe { posg_sampler_new(bad.as_ptr(), bad.as_ptr(), 0, &mut s) };
    let full = unsafe { posg_last_error(ptr::null_mut(), 0) };
    let mut small = [1 as std::ffi::c_char; 4];
    assert_eq!(unsafe { posg_last_error(small.as_mut_ptr(), 4) }, full);
    assert_eq!(small[3], 0, "truncated message is terminated");
}

#[test]
fn header_declares_every_export_and_compiles() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include/posg.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in [
        "posg_last_error",
        "posg_version",
        "posg_model_load",
        "posg_model_free",
        "posg_model_vocab_size",
        "posg_model_pos_count",
        "posg_model_is_posg",
        "posg_model_token_id",
        "posg_sampler_new",
        "posg_sampler_set_control",
        "posg_sampler_free",
        "posg_generate",
        "posg_perplexity",
        "posg_entropy_topk",
        "POSG_STATUS_BUFFER_TOO_SMALL",
    ] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("use.c");
    std::fs::write(
        &src,
        "#include \"posg.h\"\nint main(void) { PosgModel *m = 0; return (int)posg_model_vocab_size(m); }\n",
    )
    .unwrap();
    match std::process::Command::new("cc")
        .arg("-fsyntax-only")
        .arg("-Wall")
        .arg("-Werror")
        .arg(format!("-I{}", header.parent().unwrap().display()))
        .arg(&src)
        .output()
    {
        Ok(out) => assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr)),
        Err(_) => eprintln!("no C compiler; syntax check skipped"),
    }
}
