import numpy as np
import pytest

from skewformer.codec import (
    CodecError,
    CodecWarning,
    NoteEvent,
    ParseError,
    PedalEvent,
    TokenSequence,
    apply_sustain_pedal,
    augment,
    format_notes,
    ingest_notes,
    jsb_deserialize,
    jsb_serialize,
    jsb_token_attributes,
    performance_decode,
    performance_encode,
    read_grid_file,
    read_tokens,
    velocity_bin,
    write_grid_file,
    write_tokens,
)

# Opening measure used throughout: quarter notes in S/A, eighths in T/B.
OPENING_GRID = np.array(
    [
        [67, 67, 67, 67],
        [62, 62, 62, 62],
        [59, 59, 57, 57],
        [43, 43, 45, 45],
    ]
)
OPENING_TOKENS = [67, 62, 59, 43, 67, 62, 59, 43, 67, 62, 57, 45, 67, 62, 57, 45]

# Arpeggiated C major chord held by the pedal, then a short F (see the
# note-list fixture used by the CLI tests as well).
CHORD_NOTES = [
    NoteEvent(60, 80, 0, 2000),
    NoteEvent(64, 80, 500, 2000),
    NoteEvent(67, 80, 1000, 2000),
    NoteEvent(65, 100, 2500, 3000),
]
CHORD_TOKENS = [376, 60, 305, 64, 305, 67, 355, 188, 192, 195, 305, 381, 65, 305, 193]


class TestJsbGrid:
    def test_opening_measure_serialization(self):
        seq = jsb_serialize(OPENING_GRID)
        assert seq.ids == OPENING_TOKENS
        assert seq.vocab_size == 129

    def test_single_column_roundtrip(self):
        grid = np.array([[60], [55], [52], [48]])
        assert np.array_equal(jsb_deserialize(jsb_serialize(grid)), grid)

    def test_random_grids_roundtrip(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            grid = rng.integers(-1, 128, size=(4, 16))
            assert np.array_equal(jsb_deserialize(jsb_serialize(grid)), grid)

    def test_rest_mapping(self):
        grid = np.array([[60], [-1], [52], [-1]])
        seq = jsb_serialize(grid)
        assert seq.ids == [60, 128, 52, 128]

    def test_wrong_row_count(self):
        with pytest.raises(CodecError):
            jsb_serialize(np.zeros((3, 4), dtype=int))

    def test_deserialize_length_check(self):
        with pytest.raises(CodecError):
            jsb_deserialize([60, 61, 62])

    def test_token_attributes(self):
        pitches, times = jsb_token_attributes([67, 128, 59, 43, 67, 62, 59, 43])
        assert pitches.tolist() == [67, -1, 59, 43, 67, 62, 59, 43]
        assert times.tolist() == [0, 0, 0, 0, 1, 1, 1, 1]


class TestSustainPedal:
    def test_extension_to_pedal_release(self):
        notes = [NoteEvent(60, 80, 0, 1000)]
        pedals = [PedalEvent(0, 100), PedalEvent(2000, 0)]
        out = apply_sustain_pedal(notes, pedals)
        assert out[0].offset_ms == 2000

    def test_no_pedal_is_identity(self):
        notes = [NoteEvent(60, 80, 0, 1000), NoteEvent(62, 70, 100, 300)]
        assert apply_sustain_pedal(notes, []) == sorted(
            notes, key=lambda n: (n.onset_ms, n.pitch)
        )

    def test_same_pitch_restrike_limits_extension(self):
        notes = [NoteEvent(60, 80, 0, 1000), NoteEvent(60, 80, 1500, 1800)]
        pedals = [PedalEvent(0, 100), PedalEvent(2000, 0)]
        out = apply_sustain_pedal(notes, pedals)
        assert out[0].offset_ms == 1500
        assert out[1].offset_ms == 2000

    def test_original_longer_duration_kept(self):
        notes = [NoteEvent(60, 80, 0, 5000)]
        pedals = [PedalEvent(0, 100), PedalEvent(2000, 0)]
        out = apply_sustain_pedal(notes, pedals)
        assert out[0].offset_ms == 5000

    def test_off_after_release_unaffected(self):
        notes = [NoteEvent(65, 100, 2500, 3000)]
        pedals = [PedalEvent(0, 100), PedalEvent(2000, 0)]
        assert apply_sustain_pedal(notes, pedals)[0].offset_ms == 3000

    def test_never_shortens_never_overshoots(self):
        # Event-sweep oracle: replay pedal state over time and bound every
        # extension by release time and next same-pitch onset.
        rng = np.random.default_rng(1)
        for _ in range(50):
            notes = []
            for _ in range(12):
                on = int(rng.integers(0, 3000))
                notes.append(
                    NoteEvent(int(rng.integers(55, 65)), 64, on, on + int(rng.integers(50, 800)))
                )
            pedals = []
            t = 0
            for _ in range(4):
                t += int(rng.integers(100, 1200))
                pedals.append(PedalEvent(t, int(rng.integers(0, 128))))
            out = apply_sustain_pedal(notes, pedals)
            by_key = {(n.pitch, n.onset_ms, n.velocity): n for n in out}
            onsets = sorted((n.pitch, n.onset_ms) for n in notes)
            for n in notes:
                ext = by_key[(n.pitch, n.onset_ms, n.velocity)]
                assert ext.offset_ms >= n.offset_ms
                if ext.offset_ms > n.offset_ms:
                    # must not pass the next same-pitch onset
                    nxt = [o for p, o in onsets if p == n.pitch and o >= n.offset_ms]
                    if nxt:
                        assert ext.offset_ms <= nxt[0]
                    # must end while or exactly when the pedal releases
                    state = 0
                    release_after = None
                    for p in sorted(pedals, key=lambda e: e.time_ms):
                        if p.time_ms > n.offset_ms and state >= 64 and p.value < 64:
                            release_after = p.time_ms
                            break
                        state = p.value
                    if release_after is not None:
                        assert ext.offset_ms <= release_after


class TestPerformanceCodec:
    def test_chord_event_sequence(self):
        seq = performance_encode(CHORD_NOTES)
        assert seq.ids == CHORD_TOKENS

    def test_velocity_bins(self):
        assert velocity_bin(80) == 20
        assert velocity_bin(100) == 25

    def test_pedal_preprocessing_feeds_encoder(self):
        raw = [
            NoteEvent(60, 80, 0, 400),
            NoteEvent(64, 80, 500, 900),
            NoteEvent(67, 80, 1000, 1400),
            NoteEvent(65, 100, 2500, 3000),
        ]
        pedals = [PedalEvent(0, 100), PedalEvent(2000, 10)]
        seq = performance_encode(apply_sustain_pedal(raw, pedals))
        assert seq.ids == CHORD_TOKENS

    def test_decode_reconstructs_within_quantization(self):
        notes = performance_decode(performance_encode(CHORD_NOTES))
        assert len(notes) == len(CHORD_NOTES)
        for got, want in zip(notes, sorted(CHORD_NOTES, key=lambda n: (n.onset_ms, n.pitch))):
            assert got.pitch == want.pitch
            assert abs(got.onset_ms - want.onset_ms) <= 5
            assert abs(got.offset_ms - want.offset_ms) <= 5
            assert abs(got.velocity - want.velocity) <= 4

    def test_encode_decode_encode_fixed_point(self):
        rng = np.random.default_rng(2)
        for _ in range(100):
            notes = []
            t = 0
            for _ in range(int(rng.integers(1, 15))):
                t += int(rng.integers(0, 2500))
                notes.append(
                    NoteEvent(
                        int(rng.integers(0, 128)),
                        int(rng.integers(1, 128)),
                        t,
                        t + int(rng.integers(20, 4000)),
                    )
                )
            once = performance_encode(notes)
            again = performance_encode(performance_decode(once))
            assert once.ids == again.ids

    def test_long_gap_splits_into_maximal_chunks(self):
        notes = [NoteEvent(60, 64, 0, 100), NoteEvent(62, 64, 2350, 2500)]
        seq = performance_encode(notes)
        shifts = [t for t in seq.ids if 256 <= t < 356]
        # 100ms to the first off; 2250ms = 1000 + 1000 + 250 to the next on;
        # 150ms to its off
        assert shifts == [256 + 9, 355, 355, 256 + 24, 256 + 14]

    def test_every_id_in_vocabulary(self):
        seq = performance_encode(CHORD_NOTES)
        assert all(0 <= t < 388 for t in seq.ids)

    def test_unmatched_note_off_warns_and_drops(self):
        with pytest.warns(CodecWarning):
            notes = performance_decode([188])
        assert notes == []

    def test_dangling_note_on_closed_at_end(self):
        with pytest.warns(CodecWarning):
            notes = performance_decode([376, 60, 305])
        assert len(notes) == 1
        assert notes[0].offset_ms == 500

    def test_empty_note_list(self):
        assert performance_encode([]).ids == []

    def test_empty_grid_rejected(self):
        with pytest.raises(CodecError):
            jsb_serialize(np.zeros((4, 0), dtype=int))


class TestAugment:
    def test_transposition(self):
        out = augment([NoteEvent(60, 64, 0, 100)], 3, 1.0)
        assert out[0].pitch == 63

    def test_identity_stretch(self):
        notes = [NoteEvent(60, 64, 123, 456)]
        assert augment(notes, 0, 1.0) == notes

    def test_stretch_then_encode_splits_shift(self):
        notes = [NoteEvent(60, 64, 0, 100), NoteEvent(62, 64, 1000, 1100)]
        stretched = augment(notes, 0, 1.05)
        assert stretched[1].onset_ms == 1050
        seq = performance_encode(stretched)
        shifts = [t for t in seq.ids if 256 <= t < 356]
        # 105ms then 945ms to the second onset, then 105ms duration
        assert shifts[0] == 256 + 9 or shifts[0] == 256 + 10

    def test_out_of_set_parameters_rejected(self):
        with pytest.raises(CodecError):
            augment([], 4, 1.0)
        with pytest.raises(CodecError):
            augment([], 0, 1.1)

    def test_out_of_range_pitch_dropped_with_warning(self):
        with pytest.warns(CodecWarning):
            out = augment([NoteEvent(126, 64, 0, 100)], 3, 1.0)
        assert out == []


class TestIngest:
    def test_note_and_pedal_lines(self):
        text = """
        # a comment
        note 60 80 0 1000
        note 64 80 500 2000 1
        pedal 0 100
        pedal 2000 0
        """
        notes, pedals = ingest_notes(text)
        assert len(notes) == 2 and len(pedals) == 2
        assert notes[1].voice == 1

    def test_single_note_encodes_to_velocity_on_shift_off(self):
        notes, _ = ingest_notes("note 60 80 0 1000\n")
        seq = performance_encode(notes)
        assert seq.ids == [376, 60, 355, 188]

    def test_out_of_range_pitch_is_parse_error_with_line(self):
        with pytest.raises(ParseError, match="line 2"):
            ingest_notes("note 60 80 0 1000\nnote 130 80 0 1000\n")

    def test_unknown_record(self):
        with pytest.raises(ParseError):
            ingest_notes("banana 1 2 3\n")

    def test_sorted_output(self):
        notes, _ = ingest_notes("note 62 80 500 900\nnote 60 80 0 1000\n")
        assert [n.onset_ms for n in notes] == [0, 500]

    def test_format_roundtrip(self):
        notes = [NoteEvent(60, 80, 0, 1000, voice=2)]
        pedals = [PedalEvent(10, 90)]
        back_n, back_p = ingest_notes(format_notes(notes, pedals))
        assert back_n == notes and back_p == pedals


class TestFiles:
    def test_grid_file_roundtrip(self, tmp_path):
        path = tmp_path / "grid.txt"
        grid = np.array([[67, -1], [62, 62], [59, 57], [43, 45]])
        write_grid_file(path, grid)
        assert np.array_equal(read_grid_file(path), grid)

    def test_grid_file_bad_rows(self, tmp_path):
        path = tmp_path / "grid.txt"
        path.write_text("60 61\n62 63\n")
        with pytest.raises(ParseError):
            read_grid_file(path)

    def test_token_file_roundtrip(self, tmp_path):
        path = tmp_path / "seq.tokens"
        write_tokens(path, [1, 2, 388])
        assert read_tokens(path) == [1, 2, 388]
        assert path.read_text().endswith("\n")

    def test_token_sequence_validates_vocab(self):
        with pytest.raises(CodecError):
            TokenSequence("performance", [500], 388)
