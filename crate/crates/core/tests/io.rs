mod common;

use gf2cnn::checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint};
use gf2cnn::config::Config;
use gf2cnn::data::{load_mnist_idx, parse_idx_images, parse_idx_labels};
use gf2cnn::nn::*;
use gf2cnn::Error;

/// Writes IDX files the way the reference format describes them:
/// big-endian magic, big-endian dimensions, raw bytes.
fn idx(magic: u32, dims: &[u32], payload: &[u8]) -> Vec<u8> {
    let mut v = magic.to_be_bytes().to_vec();
    for d in dims {
        v.extend_from_slice(&d.to_be_bytes());
    }
    v.extend_from_slice(payload);
    v
}

fn format_offset(r: Result<impl std::fmt::Debug, Error>) -> u64 {
    match r {
        Err(Error::Format { offset, .. }) => offset,
        other => panic!("expected a format error, got {other:?}"),
    }
}

#[test]
fn idx_images_and_labels_parse() {
    let pixels: Vec<u8> = (0..3 * 4 * 5).map(|i| (i * 4) as u8).collect();
    let img = parse_idx_images(&idx(0x803, &[3, 4, 5], &pixels)).unwrap();
    assert_eq!((img.shape().n, img.shape().c, img.shape().h, img.shape().w), (3, 1, 4, 5));
    assert_eq!(img.at(1, 0, 2, 3), pixels[20 + 2 * 5 + 3] as f32 / 255.0);
    assert_eq!(img.at(2, 0, 3, 4), pixels[59] as f32 / 255.0);
    let labels = parse_idx_labels(&idx(0x801, &[4], &[7, 0, 9, 3])).unwrap();
    assert_eq!(labels, vec![7, 0, 9, 3]);
}

#[test]
fn idx_errors_carry_offsets() {
    let good = idx(0x803, &[2, 2, 2], &[0; 8]);
    assert_eq!(format_offset(parse_idx_images(&idx(0x801, &[2, 2, 2], &[0; 8]))), 0);
    assert_eq!(format_offset(parse_idx_images(&good[..10])), 8);
    assert_eq!(format_offset(parse_idx_images(&good[..20])), 20);
    let mut long = good.clone();
    long.push(1);
    assert_eq!(format_offset(parse_idx_images(&long)), 24);
    assert_eq!(format_offset(parse_idx_labels(&idx(0x801, &[3], &[1, 2]))), 10);
}

#[test]
fn idx_files_load_as_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let (ip, lp) = (dir.path().join("img"), dir.path().join("lab"));
    std::fs::write(&ip, idx(0x803, &[2, 28, 28], &[128; 2 * 28 * 28])).unwrap();
    std::fs::write(&lp, idx(0x801, &[2], &[1, 8])).unwrap();
    let ds = load_mnist_idx(&ip, &lp).unwrap();
    assert_eq!(ds.len(), 2);
    assert_eq!(ds.labels, vec![1, 8]);

    std::fs::write(&lp, idx(0x801, &[3], &[1, 8, 2])).unwrap();
    assert!(load_mnist_idx(&ip, &lp).is_err());
}

fn trained_like(seed: u64) -> Model {
    let cfg = CompressionConfig {
        targets: vec!["fire2/squeeze".into(), "fire3/squeeze".into()],
        bits: 4,
        signed: false,
        mode: CompressionMode::Channel1x1,
        compressed_channels: Some(24),
        insert_relu: false,
    };
    let (g, _, _) = insert_compression(&toy_fire_net(10, 32), &toy_fusion_plan(), &cfg).unwrap();
    let mut m = Model::init(g, seed).unwrap();
    let data = gf2cnn::data::gen_synthetic(seed, 40, 10, 32).unwrap();
    gf2cnn::train::calibrate_model(&mut m, &data, 40, 8).unwrap();
    m.iteration = 1234;
    m
}

#[test]
fn checkpoint_round_trip() {
    let m = trained_like(1);
    let bytes = save_checkpoint(&m).unwrap();
    let back = load_checkpoint(&bytes, &m.graph).unwrap();
    assert_eq!(back, m);
    assert_eq!(save_checkpoint(&back).unwrap(), bytes);

    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("m.ckpt");
    write_checkpoint(&p, &m).unwrap();
    assert_eq!(read_checkpoint(&p, &m.graph).unwrap(), m);
}

#[test]
fn checkpoint_for_other_graph_is_rejected() {
    let m = trained_like(2);
    let bytes = save_checkpoint(&m).unwrap();
    assert!(matches!(load_checkpoint(&bytes, &toy_fire_net(10, 32)), Err(Error::Checkpoint(_))));
    assert!(matches!(
        read_checkpoint(std::path::Path::new("/no/such/file.ckpt"), &m.graph),
        Err(Error::Checkpoint(_))
    ));
}

#[test]
fn damaged_checkpoints_are_format_errors() {
    let m = trained_like(3);
    let bytes = save_checkpoint(&m).unwrap();
    for cut in [0, 3, 7, 40, 47, bytes.len() / 2, bytes.len() - 1] {
        let off = format_offset(load_checkpoint(&bytes[..cut], &m.graph));
        assert!(off <= cut as u64, "cut {cut} reported offset {off}");
    }
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert_eq!(format_offset(load_checkpoint(&bad, &m.graph)), 0);
    let mut bad = bytes.clone();
    bad[4] = 99;
    assert_eq!(format_offset(load_checkpoint(&bad, &m.graph)), 4);
    let mut long = bytes;
    long.extend_from_slice(&[0, 0]);
    assert_eq!(format_offset(load_checkpoint(&long, &m.graph)), long.len() as u64 - 2);
}

#[test]
fn shipped_configs_parse_and_build() {
    for name in ["squeezenet_v1_1_227", "mobilenet_v2_224", "ssd512_base", "toy_fire"] {
        let cfg = common::config(name);
        cfg.build_graph().unwrap().validate().unwrap();
        assert!(cfg.memory_table().is_ok(), "{name}");
    }
}

#[test]
fn config_errors() {
    let cases = [
        "[network]\nbogus = 1\n",
        "not toml at all [",
        "[network]\ninput = { name = \"x\", channels = 1, height = 4, width = 4, bits = 32 }\n[train]\nbase_lr = -1.0\n",
        "[network]\ninput = { name = \"x\", channels = 1, height = 4, width = 4, bits = 32 }\n[train]\nmomentum = 2.0\n",
    ];
    for text in cases {
        assert!(matches!(Config::parse(text), Err(Error::Config(_))), "{text}");
    }
    assert!(matches!(Config::load(std::path::Path::new("/no/such.toml")), Err(Error::Config(_))));
}

#[test]
fn unknown_layer_kind_is_rejected() {
    let text = "[network]\ninput = { name = \"x\", channels = 1, height = 4, width = 4, bits = 32 }\n\
                [[layer]]\nname = \"a\"\nkind = \"teleport\"\n";
    let r = Config::parse(text).and_then(|c| c.build_graph());
    assert!(matches!(r, Err(Error::Config(_)) | Err(Error::Graph(_))), "{r:?}");
}
