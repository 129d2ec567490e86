mod common;

use common::{tree, Fixture, Server};
use shiftkit::backends::conformance::{check_embedding, check_generative};
use shiftkit::backends::{EmbeddingBackend, GenerativeBackend};
use shiftkit::generation::encode_png;
use shiftkit_service::adapter::{router, AdapterState, RemoteEmbedder, RemoteGenerator};
use shiftkit_service::backend::{toy_world, BackendChoice};
use shiftkit_service::pipeline::{self, no_progress, Context, GenerateParams, ScoreParams};
use shiftkit_service::workspace::Workspace;

fn toy_adapter() -> Server {
    let toy = BackendChoice::Toy;
    Server::start_router(router(AdapterState::new(
        toy.generator().unwrap(),
        toy.embedder().unwrap(),
    )))
}

#[test]
fn remote_backends_conform_and_match_local_outputs() {
    let server = toy_adapter();
    let mut remote_gen = RemoteGenerator::connect(&server.base).unwrap();
    let remote_emb = RemoteEmbedder::connect(&server.base).unwrap();
    let mut local_gen = BackendChoice::Toy.generator().unwrap();
    let local_emb = BackendChoice::Toy.embedder().unwrap();

    assert_eq!(remote_gen.backend_id(), local_gen.backend_id());
    assert_eq!(remote_gen.text_embedding_dim(), local_gen.text_embedding_dim());
    assert_eq!(remote_emb.dim(), local_emb.dim());

    let dim = local_gen.text_embedding_dim();
    let embedding = local_gen.word_embedding("teal").unwrap();
    assert_eq!(remote_gen.word_embedding("teal").unwrap(), embedding);
    assert!(!remote_gen.has_token("<class-0>"));
    remote_gen.register_token("<class-0>", &embedding).unwrap();
    local_gen.register_token("<class-0>", &embedding).unwrap();
    assert!(remote_gen.has_token("<class-0>"));
    // errors cross the wire the same way they arise locally
    assert!(remote_gen.register_token("<bad>", &[0.0; 3]).is_err());
    assert!(local_gen.register_token("<bad>", &[0.0; 3]).is_err());
    assert!(remote_gen.register_token("no-brackets", &embedding).is_err());
    assert!(local_gen.register_token("no-brackets", &embedding).is_err());

    let prompts = ["a photo of a <class-0> in the grass", "a photo of a red disk at night"];
    for (seed, prompt) in prompts.iter().enumerate() {
        let a = remote_gen.generate(prompt, seed as u64).unwrap();
        let b = local_gen.generate(prompt, seed as u64).unwrap();
        assert_eq!(encode_png(&a).unwrap(), encode_png(&b).unwrap(), "{prompt}");
        assert_eq!(remote_emb.embed_image(&a).unwrap(), local_emb.embed_image(&b).unwrap());
        assert_eq!(
            remote_emb.embed_text(prompt).unwrap(),
            local_emb.embed_text(prompt).unwrap()
        );
    }

    let target = local_gen.generate(prompts[0], 0).unwrap();
    let probe: Vec<f64> = embedding.iter().map(|&x| x as f64 + 0.01).collect();
    let template = "a photo of a {token}";
    let r = remote_gen.inversion_objective(&probe, &target, template, 7).unwrap();
    let l = local_gen.inversion_objective(&probe, &target, template, 7).unwrap();
    assert_eq!(r.loss, l.loss);
    assert_eq!(r.gradient, l.gradient);

    let probes: Vec<Vec<f64>> = (0..3).map(|i| vec![0.05 * i as f64; dim]).collect();
    let report = check_generative(&remote_gen, &prompts, "a photo of a {token} at dusk", &probes);
    assert!(report.passed(), "{:?}", report.failures);
    let world = toy_world();
    let images: Vec<_> = (0..4).map(|c| world.dataset_image(c, 1).unwrap()).collect();
    let report = check_embedding(
        &remote_emb,
        &images,
        &["a photo of a plate", "", "a photo in the grass"],
    );
    assert!(report.passed(), "{:?}", report.failures);
}

#[test]
fn pipeline_through_the_adapter_matches_the_in_process_backend() {
    let fx = Fixture::new();
    let local = fx.learned("local");
    std::fs::create_dir_all(fx.workspace("remote")).unwrap();
    for dir in ["tokens", "registry"] {
        copy_dir(&fx.workspace("local").join(dir), &fx.workspace("remote").join(dir));
    }
    let server = toy_adapter();
    let remote = Context::new(
        Workspace::open(fx.workspace("remote")).unwrap(),
        BackendChoice::Adapter(server.base.clone()),
    )
    .unwrap();

    for ctx in [&local, &remote] {
        for class_id in [0, 5] {
            let p = GenerateParams {
                class_id,
                shift: "on_the_rocks".into(),
                n: 4,
                seed: 3,
            };
            pipeline::generate(ctx, &p, &no_progress).unwrap();
        }
        pipeline::score(
            ctx,
            &ScoreParams {
                shift: "on_the_rocks".into(),
                class_id: None,
            },
            &no_progress,
        )
        .unwrap();
    }
    common::assert_same_tree(&tree(&fx.workspace("local")), &tree(&fx.workspace("remote")));
}

#[test]
fn unreachable_adapter_is_a_backend_error() {
    let err = RemoteGenerator::connect("http://127.0.0.1:9").unwrap_err();
    assert!(err.to_string().contains("127.0.0.1:9"), "{err}");
}

fn copy_dir(from: &std::path::Path, to: &std::path::Path) {
    std::fs::create_dir_all(to).unwrap();
    for entry in std::fs::read_dir(from).unwrap() {
        let path = entry.unwrap().path();
        let dest = to.join(path.file_name().unwrap());
        if path.is_dir() {
            copy_dir(&path, &dest);
        } else {
            std::fs::copy(&path, &dest).unwrap();
        }
    }
}
