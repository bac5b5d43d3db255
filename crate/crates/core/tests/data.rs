use loopformer_core::data::{
    batches, gen_synthetic, symbol_name, Batcher, ParallelCorpus, SyntheticTask, Vocab, BOS, EOS,
    PAD,
};

fn strip(row: &[usize]) -> Vec<usize> {
    row.iter()
        .copied()
        .filter(|&t| t != PAD && t != BOS && t != EOS)
        .collect()
}

#[test]
fn an_epoch_covers_every_pair_once_within_budget() {
    let corpus = gen_synthetic(SyntheticTask::Reverse, 300, 1, 9, 20, 3).unwrap();
    let vocab = Vocab::build(&corpus, 20).unwrap();
    let batcher = Batcher::new(&corpus, &vocab, 64);
    assert_eq!(batcher.skipped(), 0);
    for epoch in 0..3 {
        let mut seen: Vec<(Vec<usize>, Vec<usize>)> = Vec::new();
        for b in batcher.epoch(11, epoch) {
            assert!(b.padded_tokens() <= 64);
            for i in 0..b.size {
                let s = strip(&b.src[i * b.src_len..(i + 1) * b.src_len]);
                let t = strip(&b.tgt_out[i * b.tgt_len..(i + 1) * b.tgt_len]);
                seen.push((s, t));
            }
        }
        let mut want = batcher.pairs().to_vec();
        want.sort();
        seen.sort();
        assert_eq!(seen, want, "epoch {epoch}");
    }
}

#[test]
fn shuffling_is_seeded_per_epoch() {
    let corpus = gen_synthetic(SyntheticTask::Copy, 200, 3, 8, 16, 1).unwrap();
    let vocab = Vocab::build(&corpus, 16).unwrap();
    let batcher = Batcher::new(&corpus, &vocab, 90);
    assert_eq!(batcher.epoch(4, 0), batcher.epoch(4, 0));
    assert_ne!(batcher.epoch(4, 0), batcher.epoch(4, 1));
    assert_ne!(batcher.epoch(4, 0), batcher.epoch(5, 0));
    assert_eq!(batches(&corpus, &vocab, 90, 4).batches, batcher.epoch(4, 0));
}

#[test]
fn oversized_sentences_are_skipped_and_counted() {
    let corpus =
        ParallelCorpus::from_texts("a b\na b c d e f g\nc\n", "a b\ng f e d c b a\nc\n").unwrap();
    let vocab = Vocab::build(&corpus, 20).unwrap();
    let r = batches(&corpus, &vocab, 5, 0);
    assert_eq!(r.skipped, 1);
    assert_eq!(r.batches.iter().map(|b| b.size).sum::<usize>(), 2);
}

#[test]
fn generation_is_deterministic_and_rot13_shifts_by_half_the_alphabet() {
    let a = gen_synthetic(SyntheticTask::Rot13Digits, 50, 2, 6, 14, 9).unwrap();
    assert_eq!(
        a,
        gen_synthetic(SyntheticTask::Rot13Digits, 50, 2, 6, 14, 9).unwrap()
    );
    // 10 symbols, shift 5: applying the cipher twice is the identity
    let index = |name: &str| (0..10).find(|&i| symbol_name(i) == name).unwrap();
    for p in &a.pairs {
        assert_eq!(p.source.len(), p.target.len());
        for (s, t) in p.source.iter().zip(&p.target) {
            assert_eq!(index(t), (index(s) + 5) % 10);
            assert_eq!(symbol_name((index(t) + 5) % 10), *s);
        }
    }
    assert!(gen_synthetic(SyntheticTask::Copy, 5, 0, 3, 16, 1).is_err());
    assert!(gen_synthetic(SyntheticTask::Copy, 5, 4, 3, 16, 1).is_err());
    assert!(gen_synthetic(SyntheticTask::Copy, 5, 1, 3, 4, 1).is_err());
}

#[test]
fn unknown_tokens_render_as_the_unk_marker() {
    let corpus = ParallelCorpus::from_texts("x y\n", "y x\n").unwrap();
    let vocab = Vocab::build(&corpus, 10).unwrap();
    let ids = vocab.encode_line("x q y");
    assert_eq!(vocab.decode(&ids), "x <unk> y");
    assert_eq!(vocab.decode(&vocab.encode_line("y x")), "y x");
}
