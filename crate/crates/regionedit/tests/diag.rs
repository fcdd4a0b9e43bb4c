use regionedit::checkpoint::Checkpoint;
use regionedit::encoders::{TextEncoder, VisionEncoder};
use regionedit::metrics::infer_region;
use regionedit::region::FusionWeights;
use regionedit::synth::load_corpus;
use regionedit::encoders::PaddedCaption;
use regionedit::text::Vocab;

#[test]
#[ignore]
fn mask_diag() {
    let ck = Checkpoint::load(std::path::Path::new("/tmp/diag/out/encoders.ckpt")).unwrap();
    let vision = VisionEncoder::load_from("vision.", &ck).unwrap();
    let text = TextEncoder::load_from("text.", &ck).unwrap();
    let ek = Checkpoint::load(std::path::Path::new("/tmp/diag/out/editor.ckpt")).unwrap();
    let fusion = FusionWeights::load_from("fusion.", &ek).unwrap();
    let vocab = Vocab::default();
    let samples = load_corpus(std::path::Path::new("/tmp/diag/corpus/eval")).unwrap();
    for s in samples.iter().take(6) {
        let ins = std::fs::read_to_string(format!("/tmp/diag/corpus/eval/{}.instruction.txt", s.id)).unwrap();
        let p = PaddedCaption::from_text(&vocab, ins.trim()).unwrap();
        let f_ins = text.encode_sequence(&p.ids, &p.pad_mask).unwrap();
        let (_, f_img) = vision.encode_image(&s.pixels).unwrap();
        let r = infer_region(&fusion, &f_img, &f_ins, &p.pad_mask, 0.2, 8).unwrap();
        let probs = infer_probs(&fusion, &f_img, &f_ins, &p.pad_mask);
        let mx = probs.iter().cloned().fold(0.0f64, f64::max);
        let mn = probs.iter().cloned().fold(1.0f64, f64::min);
        let cells: Vec<usize> = r.m_region.iter().enumerate().filter(|(_, &b)| b != 0).map(|(i, _)| i).collect();
        // spread of frozen patch features across the 64 rows
        let d = f_img.shape()[1];
        let n = f_img.shape()[0];
        let data = f_img.data();
        let mut maxdiff = 0.0f64;
        for i in 1..n {
            let mut acc = 0.0;
            for k in 0..d { acc += (data[i*d+k] - data[k]).powi(2); }
            maxdiff = maxdiff.max(acc.sqrt());
        }
        println!("id={} ins={:?} probs[min={:.4} max={:.4}] ncells={} patchspread={:.4}", s.id, ins.trim(), mn, mx, cells.len(), maxdiff);
    }
}

fn infer_probs(fusion: &FusionWeights, f_img: &regionedit::tensor::Tensor, f_ins: &regionedit::tensor::Tensor, pad: &[bool]) -> Vec<f64> {
    use regionedit::tensor::tape::Tape;
    let mut tape = Tape::new();
    let b = fusion.bind(&mut tape, false);
    let fi = tape.leaf(f_img.clone(), false);
    let fs = tape.leaf(f_ins.clone(), false);
    let (_, p) = b.forward(&mut tape, fi, fs, pad).unwrap();
    tape.value(p).data().to_vec()
}
