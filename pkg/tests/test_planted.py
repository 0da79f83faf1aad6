from morphotok.planted import PlantedSpec, planted_corpus, planted_lines, planted_words


def test_inventory_shape():
    spec = PlantedSpec()
    words = planted_words(spec)
    assert len(words) == 50 and len(set(words)) == 50
    assert all(2 <= len(w) <= 5 for w in words)
    assert set("".join(words)) <= set("abcdefghij")


def test_gold_matches_generation(small_planted):
    lines, _ = planted_lines(PlantedSpec(min_units=6000, seed=11))
    assert len(lines) == len(small_planted)
    for line, seq, gold in zip(lines, small_planted.sequences, small_planted.gold):
        words = line.split(" ")
        cuts, pos = set(), 0
        for w in words[:-1]:
            pos += len(w)
            cuts.add(pos)
        assert seq == "".join(words) and gold == cuts


def test_size_and_determinism():
    a = planted_corpus(PlantedSpec(min_units=3000, seed=2))
    b = planted_corpus(PlantedSpec(min_units=3000, seed=2))
    assert a.total_units >= 3000
    assert a.sequences == b.sequences


def test_line_length_range():
    c = planted_corpus(PlantedSpec(min_units=4000, words_per_line=(2, 4), seed=1))
    assert all(1 <= len(g) <= 3 for g in c.gold)
