use super::*;
use crate::phoneset::SOS_EOS;

fn cfg() -> ArchConfig {
    ArchConfig { feat_dim: 12, ..ArchConfig::desk() }.with_vocab(11)
}

fn feats(frames: usize, dim: usize, phase: f64) -> Tensor<f64> {
    Tensor::from_fn(&[frames, dim], |i| ((i as f64) * 0.37 + phase).sin())
}

#[test]
fn subsampling_length_formula() {
    let c = ArchConfig::desk();
    assert_eq!(c.subsampled_len(16), 4);
    for t in 1..=1000 {
        assert_eq!(c.subsampled_len(t), t.div_ceil(2).div_ceil(2), "T={t}");
    }
}

#[test]
fn encoder_output_shape_and_pad_invariance() {
    let c = cfg();
    let p = init_params::<f64>(&c, 3).unwrap();
    let base = feats(16, 12, 0.0);
    let mut padded = Tensor::from_fn(&[23, 12], |i| 100.0 + i as f64);
    padded.data_mut()[..16 * 12].copy_from_slice(base.data());
    let outs = encode(&p, &c, &[base.clone(), padded, base], &[16, 16, 16]).unwrap();
    assert_eq!(outs[0].shape(), &[4, c.d_model]);
    assert!(outs[0].max_abs_diff(&outs[1]) <= 1e-5);
    assert_eq!(outs[0], outs[2]);
}

#[test]
fn too_short_and_shape_errors() {
    let c = cfg();
    let p = init_params::<f64>(&c, 3).unwrap();
    assert!(matches!(encode(&p, &c, &[feats(0, 12, 0.0)], &[0]), Err(ModelError::TooShort { .. })));
    assert!(matches!(encode(&p, &c, &[feats(8, 7, 0.0)], &[8]), Err(ModelError::Autodiff(_))));
    assert!(encode(&p, &c, &[feats(8, 12, 0.0)], &[9]).is_err());
}

#[test]
fn ctc_rows_are_normalized() {
    let c = cfg();
    let p = init_params::<f32>(&c, 1).unwrap();
    let enc = encode(&p, &c, &[feats(20, 12, 0.5).cast()], &[20]).unwrap();
    let lp = ctc_head(&p, &c, &enc[0]).unwrap();
    assert_eq!(lp.shape(), &[5, 11]);
    for r in 0..5 {
        let lse: f64 = lp.row(r).iter().map(|&x| (x as f64).exp()).sum::<f64>().ln();
        assert!(lse.abs() <= 1e-5);
    }
}

#[test]
fn cached_decoding_matches_full_recompute() {
    let c = cfg();
    let p = init_params::<f64>(&c, 9).unwrap();
    let enc = encode(&p, &c, &[feats(24, 12, 1.0)], &[24]).unwrap().remove(0);
    let prefix = [SOS_EOS, 5, 7, 4, 9, 5];
    let mut s = Session::inference(&p, &c);
    let e = s.tape.constant(enc.clone());
    let mut cache = s.new_cache(e).unwrap();
    for n in 1..=prefix.len() {
        let inc = s.decode_step(&prefix[..n], &mut cache).unwrap();
        let full = decode_step(&p, &c, &enc, &prefix[..n]).unwrap();
        assert_eq!(inc.len(), c.vocab_size_out);
        let diff = inc.iter().zip(&full).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-5, "step {n}: {diff}");
    }
    // Feeding several tokens at once gives the same logits.
    let mut cache2 = s.new_cache(e).unwrap();
    let jump = s.decode_step(&prefix, &mut cache2).unwrap();
    let full = decode_step(&p, &c, &enc, &prefix).unwrap();
    assert!(jump.iter().zip(&full).all(|(a, b)| (a - b).abs() <= 1e-5));
}

#[test]
fn decoder_is_causal() {
    let c = cfg();
    let p = init_params::<f64>(&c, 4).unwrap();
    let enc = encode(&p, &c, &[feats(16, 12, 2.0)], &[16]).unwrap().remove(0);
    let run = |prefix: &[usize]| {
        let mut s = Session::inference(&p, &c);
        let e = s.tape.constant(enc.clone());
        let l = s.decoder_forward(e, prefix).unwrap();
        s.tape.value(l).data()[..3 * c.vocab_size_out].to_vec()
    };
    assert_eq!(run(&[SOS_EOS, 4, 5, 6, 7]), run(&[SOS_EOS, 4, 5, 9, 10]));
}

#[test]
fn prefix_validation() {
    let c = ArchConfig { max_dec_len: 3, ..cfg() };
    let p = init_params::<f64>(&c, 4).unwrap();
    let enc = Tensor::zeros(&[2, c.d_model]);
    assert!(matches!(decode_step(&p, &c, &enc, &[SOS_EOS, 4, 5, 6]), Err(ModelError::PrefixTooLong { len: 4, max: 3 })));
    assert!(matches!(decode_step(&p, &c, &enc, &[4, 5]), Err(ModelError::BadPrefix)));
    assert!(matches!(decode_step(&p, &c, &enc, &[SOS_EOS, 11]), Err(ModelError::TokenOutOfRange { id: 11, size: 11 })));
}

#[test]
fn init_is_seeded() {
    let c = cfg();
    let a = init_params::<f32>(&c, 5).unwrap();
    assert_eq!(a, init_params::<f32>(&c, 5).unwrap());
    assert_ne!(a, init_params::<f32>(&c, 6).unwrap());
    assert_eq!(a.get("encoder.block0.ffn1.norm.gain").unwrap().data(), &[1.0; 64]);
    assert!(a.get("ctc.bias").unwrap().data().iter().all(|&x| x == 0.0));
    a.check_against(&c).unwrap();
    assert!(a.check_against(&c.clone().with_vocab(12)).is_err());
}

#[test]
fn desk_parameter_count_closed_form() {
    let c = ArchConfig::desk().with_vocab(40);
    let (f, d, ff, k, kc, h, w, v) = (80, 64, 128, 3, 7, 2, 16, 40);
    let norm = 2 * d;
    let lin = |i: usize, o: usize| i * o + o;
    let ffn = norm + lin(d, ff) + lin(ff, d);
    let att = norm + 4 * lin(d, d);
    let subsample = lin(k * f, d) + lin(k * d, d);
    let conv = norm + lin(d, 2 * d) + lin(kc, d) + norm + lin(d, d);
    let enc_block = 2 * ffn + att + h * (2 * w + 1) + conv + norm;
    let dec_block = 2 * att + ffn;
    let expected = subsample + 2 * enc_block + v * d + 2 * dec_block + norm + lin(d, v) + lin(d, v);
    let p = init_params::<f32>(&c, 0).unwrap();
    assert_eq!(p.num_elements(), expected);
}

#[test]
fn config_validation_and_fingerprint() {
    assert!(ArchConfig { heads: 3, ..cfg() }.validate().is_err());
    assert!(ArchConfig { conv_kernel: 8, ..cfg() }.validate().is_err());
    assert!(ArchConfig::desk().validate().is_err());
    assert!(matches!(init_params::<f32>(&ArchConfig::desk(), 0), Err(ModelError::BadConfig(_))));
    let a = cfg();
    assert_eq!(a.fingerprint(), cfg().fingerprint());
    assert_ne!(a.fingerprint(), a.clone().with_vocab(12).fingerprint());
    assert_eq!(a.fingerprint(), ArchConfig { dropout_p: 0.3, ..a.clone() }.fingerprint());
    assert_ne!(a.fingerprint(), ArchConfig { rel_pos_window: 8, ..a.clone() }.fingerprint());
}

#[test]
fn paper_profile_constants() {
    let p = ArchConfig::paper();
    assert_eq!((p.enc_layers, p.dec_layers, p.heads, p.d_model, p.d_ff, p.conv_kernel), (18, 2, 4, 768, 2048, 31));
    assert_eq!((p.subsample_cnn_layers, p.subsample_stride), (2, 2));
}

#[test]
fn training_session_collects_gradients() {
    let c = cfg();
    let p = init_params::<f64>(&c, 2).unwrap();
    let mut s = Session::training(&p, &c, Some(1));
    let enc = s.encode(&feats(16, 12, 0.1), 16).unwrap();
    let lp = s.ctc_head(enc).unwrap();
    let l = s.tape.sum(lp).unwrap();
    s.tape.backward(l).unwrap();
    let g = s.gradients();
    assert!(g.contains_key("ctc.weight"));
    assert!(g.contains_key("encoder.subsample.conv0.weight"));
    assert!(!g.contains_key("decoder.out.weight"));
}
