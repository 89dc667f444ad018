#pragma once

// Synthetic audio-visual corpora whose two modalities are tied together by a
// latent token sequence, plus the on-disk corpus format and batch loading.
//
// corpus.bin:  "AVSYN1" | u32 version | records...
//   record:    str utt_id | u32 n + n×u32 token ids
//              | u32 audio_frames | u32 audio_dim | f32 values
//              | u32 frames | u32 height | u32 width | f32 values
// manifest.json: spec echo and per-record byte offsets.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "avd2v/binio.hpp"
#include "avd2v/frontends.hpp"
#include "avd2v/random.hpp"

namespace avd2v {

inline constexpr char kCorpusMagic[] = "AVSYN1";
inline constexpr std::uint32_t kCorpusVersion = 1;

struct SyntheticCorpusSpec {
  std::size_t vocab_size = 16;
  std::size_t utterance_count = 500;
  std::size_t min_frames = 40;
  std::size_t max_frames = 120;
  std::size_t frames_per_token = 4;
  std::size_t audio_dim = 26;
  std::size_t audio_rate_factor = 4;  // audio frames per video frame (100 fps vs 25 fps)
  double audio_noise_sigma = 2.0;
  std::size_t video_side = 24;
  double video_noise_sigma = 0.5;
  std::size_t glyph_cells = 6;
  bool video_informative = true;
  std::uint64_t seed = 1;

  void validate() const {
    if (vocab_size < 1) throw ConfigError("corpus.vocab_size must be >= 1");
    if (utterance_count < 1) throw ConfigError("corpus.utterances must be >= 1");
    if (frames_per_token < 1) throw ConfigError("corpus.frames_per_token must be >= 1");
    if (min_frames < 1 || max_frames < min_frames) throw ConfigError("corpus frame range must be positive and ordered");
    if ((max_frames / frames_per_token) * frames_per_token < min_frames)
      throw ConfigError("corpus frame range admits no whole number of tokens");
    if (audio_noise_sigma < 0 || video_noise_sigma < 0) throw ConfigError("corpus noise sigmas must be >= 0");
    if (audio_dim < 1 || audio_rate_factor < 1) throw ConfigError("corpus audio dims must be >= 1");
    if (glyph_cells < 1 || video_side < glyph_cells) throw ConfigError("corpus.video_side must be >= glyph cells");
  }

  nlohmann::json to_json() const {
    return {{"vocab_size", vocab_size},
            {"utterance_count", utterance_count},
            {"min_frames", min_frames},
            {"max_frames", max_frames},
            {"frames_per_token", frames_per_token},
            {"audio_dim", audio_dim},
            {"audio_rate_factor", audio_rate_factor},
            {"audio_noise_sigma", audio_noise_sigma},
            {"video_side", video_side},
            {"video_noise_sigma", video_noise_sigma},
            {"glyph_cells", glyph_cells},
            {"video_informative", video_informative},
            {"seed", seed}};
  }

  static SyntheticCorpusSpec from_json(const nlohmann::json& j) {
    SyntheticCorpusSpec s;
    s.vocab_size = j.at("vocab_size");
    s.utterance_count = j.at("utterance_count");
    s.min_frames = j.at("min_frames");
    s.max_frames = j.at("max_frames");
    s.frames_per_token = j.at("frames_per_token");
    s.audio_dim = j.at("audio_dim");
    s.audio_rate_factor = j.at("audio_rate_factor");
    s.audio_noise_sigma = j.at("audio_noise_sigma");
    s.video_side = j.at("video_side");
    s.video_noise_sigma = j.at("video_noise_sigma");
    s.glyph_cells = j.at("glyph_cells");
    s.video_informative = j.at("video_informative");
    s.seed = j.at("seed");
    return s;
  }
};

struct Utterance {
  std::string utt_id;
  std::vector<std::uint32_t> tokens;
  AudioFrames<float> audio;  // raw, at audio_rate_factor × the video rate
  VideoFrames<float> video;

  std::size_t frames() const { return video.frames; }
};

/// Per-token audio templates and video glyphs, drawn once per corpus.
struct CorpusTemplates {
  std::vector<std::vector<float>> audio;  // vocab × audio_dim
  std::vector<std::vector<float>> glyph;  // vocab × side²

  static CorpusTemplates draw(const SyntheticCorpusSpec& spec) {
    CorpusTemplates t;
    Rng rng(derive_seed(spec.seed, 0xA0D10ULL));
    for (std::size_t v = 0; v < spec.vocab_size; ++v) {
      std::vector<float> a(spec.audio_dim);
      for (auto& x : a) x = static_cast<float>(rng.normal());
      t.audio.push_back(std::move(a));
    }
    const std::size_t g = spec.glyph_cells, side = spec.video_side;
    for (std::size_t v = 0; v < spec.vocab_size; ++v) {
      std::vector<float> cells(g * g);
      for (auto& c : cells) c = rng.bernoulli(0.5) ? 1.0f : 0.0f;
      std::vector<float> img(side * side);
      for (std::size_t y = 0; y < side; ++y)
        for (std::size_t x = 0; x < side; ++x) img[y * side + x] = cells[(y * g / side) * g + (x * g / side)];
      t.glyph.push_back(std::move(img));
    }
    return t;
  }
};

/// Latent token of video frame t.
inline std::size_t frame_token_index(std::size_t t, std::size_t frames_per_token) { return t / frames_per_token; }

inline Utterance generate_utterance(const SyntheticCorpusSpec& spec, const CorpusTemplates& tpl, std::size_t index) {
  Rng rng(derive_seed(spec.seed, index + 1));
  const std::size_t fpt = spec.frames_per_token;
  const std::size_t lo = (spec.min_frames + fpt - 1) / fpt;
  const std::size_t hi = spec.max_frames / fpt;
  const std::size_t n_tokens = lo + rng.below(hi - lo + 1);
  Utterance u;
  char id[32];
  std::snprintf(id, sizeof id, "utt%05zu", index);
  u.utt_id = id;
  for (std::size_t i = 0; i < n_tokens; ++i) u.tokens.push_back(static_cast<std::uint32_t>(rng.below(spec.vocab_size)));

  const std::size_t U = n_tokens * fpt;
  const std::size_t R = spec.audio_rate_factor;
  u.audio.frames = U * R;
  u.audio.dims = spec.audio_dim;
  u.audio.frame_rate = 25.0 * double(R);
  u.audio.values.resize(u.audio.frames * u.audio.dims);
  for (std::size_t t = 0; t < u.audio.frames; ++t) {
    const auto& a = tpl.audio[u.tokens[frame_token_index(t / R, fpt)]];
    for (std::size_t d = 0; d < spec.audio_dim; ++d)
      u.audio.values[t * spec.audio_dim + d] = a[d] + static_cast<float>(spec.audio_noise_sigma * rng.normal());
  }

  const std::size_t S = spec.video_side;
  u.video.frames = U;
  u.video.height = S;
  u.video.width = S;
  u.video.values.resize(U * S * S);
  for (std::size_t t = 0; t < U; ++t) {
    const auto& g = tpl.glyph[u.tokens[frame_token_index(t, fpt)]];
    for (std::size_t i = 0; i < S * S; ++i) {
      const float base = spec.video_informative ? g[i] : 0.5f;
      u.video.values[t * S * S + i] = base + static_cast<float>(spec.video_noise_sigma * rng.normal());
    }
  }
  return u;
}

namespace detail {

inline void write_utterance(binio::Writer& w, const Utterance& u) {
  w.str(u.utt_id);
  w.u32(static_cast<std::uint32_t>(u.tokens.size()));
  for (auto t : u.tokens) w.u32(t);
  w.u32(static_cast<std::uint32_t>(u.audio.frames));
  w.u32(static_cast<std::uint32_t>(u.audio.dims));
  w.f32s(std::span<const float>(u.audio.values));
  w.u32(static_cast<std::uint32_t>(u.video.frames));
  w.u32(static_cast<std::uint32_t>(u.video.height));
  w.u32(static_cast<std::uint32_t>(u.video.width));
  w.f32s(std::span<const float>(u.video.values));
}

inline Utterance read_utterance(binio::Reader& r, const std::string& expected_id) {
  Utterance u;
  try {
    u.utt_id = r.str(4096);
    if (!expected_id.empty() && u.utt_id != expected_id)
      throw FormatError("record id '" + u.utt_id + "' does not match manifest");
    const auto n = r.u32();
    if (n > r.remaining() / 4) throw FormatError("implausible token count");
    for (std::uint32_t i = 0; i < n; ++i) u.tokens.push_back(r.u32());
    u.audio.frames = r.u32();
    u.audio.dims = r.u32();
    if (u.audio.dims == 0) throw FormatError("zero audio dimension");
    if (u.audio.frames > r.remaining() / (4 * u.audio.dims)) throw FormatError("truncated audio block");
    u.audio.values = r.f32s<float>(u.audio.frames * u.audio.dims);
    u.video.frames = r.u32();
    u.video.height = r.u32();
    u.video.width = r.u32();
    const std::size_t px = u.video.height * u.video.width;
    if (px == 0 || u.video.frames > r.remaining() / (4 * px)) throw FormatError("truncated video block");
    u.video.values = r.f32s<float>(u.video.frames * px);
    if (u.video.frames == 0 || u.audio.frames % u.video.frames != 0)
      throw FormatError("audio/video frame counts are inconsistent");
    u.audio.frame_rate = 25.0 * double(u.audio.frames / u.video.frames);
  } catch (const FormatError& e) {
    throw FormatError("corrupt record '" + (u.utt_id.empty() ? expected_id : u.utt_id) + "': " + e.what());
  }
  return u;
}

}  // namespace detail

struct ManifestEntry {
  std::string utt_id;
  std::uint64_t offset = 0;
  std::uint64_t bytes = 0;
  std::size_t frames = 0;
  std::size_t audio_frames = 0;
  std::size_t tokens = 0;
};

struct Manifest {
  SyntheticCorpusSpec spec;
  std::vector<ManifestEntry> entries;
};

inline std::string corpus_bin_path(const std::string& dir) { return (std::filesystem::path(dir) / "corpus.bin").string(); }
inline std::string manifest_path(const std::string& dir) { return (std::filesystem::path(dir) / "manifest.json").string(); }

/// Writes corpus.bin and manifest.json under `dir`. Deterministic in the spec.
inline Manifest generate_corpus(const SyntheticCorpusSpec& spec, const std::string& dir) {
  spec.validate();
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create '" + dir + "': " + ec.message());
  const auto tpl = CorpusTemplates::draw(spec);
  binio::Writer w;
  w.raw(std::string_view(kCorpusMagic, 6));
  w.u32(kCorpusVersion);
  Manifest m;
  m.spec = spec;
  for (std::size_t i = 0; i < spec.utterance_count; ++i) {
    const auto u = generate_utterance(spec, tpl, i);
    const std::size_t start = w.size();
    detail::write_utterance(w, u);
    m.entries.push_back({u.utt_id, start, w.size() - start, u.video.frames, u.audio.frames, u.tokens.size()});
  }
  nlohmann::json j;
  j["format"] = kCorpusMagic;
  j["version"] = kCorpusVersion;
  j["spec"] = spec.to_json();
  j["utterances"] = nlohmann::json::array();
  for (const auto& e : m.entries)
    j["utterances"].push_back({{"utt_id", e.utt_id},
                               {"offset", e.offset},
                               {"bytes", e.bytes},
                               {"frames", e.frames},
                               {"audio_frames", e.audio_frames},
                               {"tokens", e.tokens}});
  binio::write_file_atomic(corpus_bin_path(dir), w.bytes());
  binio::write_file_atomic(manifest_path(dir), j.dump(2) + "\n");
  return m;
}

inline Manifest load_manifest(const std::string& dir) {
  const auto text = binio::read_file(manifest_path(dir));
  Manifest m;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.at("format") != kCorpusMagic || j.at("version") != kCorpusVersion)
      throw FormatError("unsupported manifest format");
    m.spec = SyntheticCorpusSpec::from_json(j.at("spec"));
    for (const auto& e : j.at("utterances"))
      m.entries.push_back({e.at("utt_id"), e.at("offset"), e.at("bytes"), e.at("frames"), e.at("audio_frames"),
                           e.at("tokens")});
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("manifest '" + manifest_path(dir) + "': " + e.what());
  }
  return m;
}

/// All utterances of a corpus held in memory.
class Corpus {
 public:
  static Corpus load(const std::string& dir) {
    Corpus c;
    c.manifest_ = load_manifest(dir);
    const auto bytes = binio::read_file(corpus_bin_path(dir));
    binio::Reader header(bytes.data(), bytes.size(), "corpus header");
    if (header.raw(6) != std::string(kCorpusMagic, 6)) throw FormatError("corpus.bin: bad magic");
    if (header.u32() != kCorpusVersion) throw FormatError("corpus.bin: unsupported version");
    for (const auto& e : c.manifest_.entries) {
      if (e.offset > bytes.size() || e.bytes > bytes.size() - e.offset)
        throw FormatError("corrupt record '" + e.utt_id + "': offset outside corpus.bin");
      binio::Reader r(bytes.data() + e.offset, e.bytes, e.utt_id);
      auto u = detail::read_utterance(r, e.utt_id);
      if (!r.at_end()) throw FormatError("corrupt record '" + e.utt_id + "': trailing bytes");
      c.utterances_.push_back(std::move(u));
    }
    return c;
  }

  static Corpus from_utterances(SyntheticCorpusSpec spec, std::vector<Utterance> utts) {
    Corpus c;
    c.manifest_.spec = spec;
    for (const auto& u : utts) c.manifest_.entries.push_back({u.utt_id, 0, 0, u.video.frames, u.audio.frames, u.tokens.size()});
    c.utterances_ = std::move(utts);
    return c;
  }

  const Manifest& manifest() const { return manifest_; }
  const SyntheticCorpusSpec& spec() const { return manifest_.spec; }
  std::size_t size() const { return utterances_.size(); }
  const Utterance& operator[](std::size_t i) const { return utterances_.at(i); }

 private:
  Manifest manifest_;
  std::vector<Utterance> utterances_;
};

// ---------------------------------------------------------------------------
// Batching

/// Padded mini-batch. Audio rows are padded to max_len × audio_rate frames,
/// video to max_len frames; padding_mask marks padded video-rate frames.
struct ModalityBatch {
  std::vector<std::string> utt_ids;
  std::vector<std::size_t> lengths;
  std::size_t max_len = 0;
  std::size_t audio_rate = 4;
  std::size_t audio_dim = 0;
  std::size_t video_side = 0;
  std::vector<float> audio;  // B × (max_len·audio_rate) × audio_dim
  std::vector<float> video;  // B × max_len × side × side
  std::vector<std::uint8_t> padding_mask;  // B × max_len, 1 = padding
  std::vector<std::vector<std::uint32_t>> tokens;

  std::size_t size() const { return utt_ids.size(); }

  AudioFrames<float> audio_of(std::size_t b) const {
    AudioFrames<float> a;
    a.frames = lengths[b] * audio_rate;
    a.dims = audio_dim;
    a.frame_rate = 25.0 * double(audio_rate);
    const std::size_t stride = max_len * audio_rate * audio_dim;
    a.values.assign(audio.begin() + b * stride, audio.begin() + b * stride + a.frames * a.dims);
    return a;
  }

  VideoFrames<float> video_of(std::size_t b) const {
    VideoFrames<float> v;
    v.frames = lengths[b];
    v.height = v.width = video_side;
    const std::size_t px = video_side * video_side;
    const std::size_t stride = max_len * px;
    v.values.assign(video.begin() + b * stride, video.begin() + b * stride + v.frames * px);
    return v;
  }
};

/// Pads the selected utterances into one batch. Raises ConfigError when more
/// than one utterance is requested and B × max_len exceeds the frame limit.
inline ModalityBatch load_batch(const Corpus& corpus, const std::vector<std::size_t>& indices,
                                std::size_t batch_limit_frames) {
  if (indices.empty()) throw ContractError("load_batch: no utterances requested");
  ModalityBatch b;
  for (auto i : indices) {
    if (i >= corpus.size()) throw ContractError("load_batch: index " + std::to_string(i) + " out of range");
    b.max_len = std::max(b.max_len, corpus[i].frames());
  }
  if (indices.size() > 1 && indices.size() * b.max_len > batch_limit_frames)
    throw ConfigError("load_batch: " + std::to_string(indices.size()) + " × " + std::to_string(b.max_len) +
                      " frames exceeds the batch limit " + std::to_string(batch_limit_frames));
  const auto& first = corpus[indices[0]];
  b.audio_rate = first.audio.frames / first.video.frames;
  b.audio_dim = first.audio.dims;
  b.video_side = first.video.height;
  const std::size_t px = b.video_side * b.video_side;
  const std::size_t audio_stride = b.max_len * b.audio_rate * b.audio_dim;
  b.audio.assign(indices.size() * audio_stride, 0.0f);
  b.video.assign(indices.size() * b.max_len * px, 0.0f);
  b.padding_mask.assign(indices.size() * b.max_len, 1);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const auto& u = corpus[indices[k]];
    if (u.audio.dims != b.audio_dim || u.video.height != b.video_side || u.video.width != b.video_side ||
        u.audio.frames != u.video.frames * b.audio_rate)
      throw FormatError("corrupt record '" + u.utt_id + "': dimensions differ from the rest of the batch");
    b.utt_ids.push_back(u.utt_id);
    b.lengths.push_back(u.frames());
    b.tokens.push_back(u.tokens);
    std::copy(u.audio.values.begin(), u.audio.values.end(), b.audio.begin() + k * audio_stride);
    std::copy(u.video.values.begin(), u.video.values.end(), b.video.begin() + k * b.max_len * px);
    std::fill_n(b.padding_mask.begin() + k * b.max_len, u.frames(), 0);
  }
  return b;
}

/// Groups shuffled utterances greedily so that count × longest ≤ limit.
inline std::vector<std::vector<std::size_t>> plan_batches(const Corpus& corpus, std::vector<std::size_t> pool,
                                                          std::size_t batch_limit_frames, Rng& rng) {
  for (std::size_t i = pool.size(); i > 1; --i) std::swap(pool[i - 1], pool[rng.below(i)]);
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> cur;
  std::size_t longest = 0;
  for (auto i : pool) {
    const std::size_t f = corpus[i].frames();
    if (!cur.empty() && (cur.size() + 1) * std::max(longest, f) > batch_limit_frames) {
      batches.push_back(std::move(cur));
      cur.clear();
      longest = 0;
    }
    cur.push_back(i);
    longest = std::max(longest, f);
  }
  if (!cur.empty()) batches.push_back(std::move(cur));
  return batches;
}

// ---------------------------------------------------------------------------
// Video augmentation

template <class T>
VideoFrames<T> hflip(const VideoFrames<T>& v) {
  VideoFrames<T> out = v;
  for (std::size_t t = 0; t < v.frames; ++t)
    for (std::size_t y = 0; y < v.height; ++y)
      for (std::size_t x = 0; x < v.width; ++x)
        out.values[(t * v.height + y) * v.width + x] = v.values[(t * v.height + y) * v.width + (v.width - 1 - x)];
  return out;
}

template <class T>
VideoFrames<T> crop_video(const VideoFrames<T>& v, std::size_t top, std::size_t left, std::size_t side) {
  if (top + side > v.height || left + side > v.width) throw DimensionError("crop_video: crop outside frame");
  VideoFrames<T> out;
  out.frames = v.frames;
  out.height = out.width = side;
  out.frame_rate = v.frame_rate;
  out.values.resize(v.frames * side * side);
  for (std::size_t t = 0; t < v.frames; ++t)
    for (std::size_t y = 0; y < side; ++y)
      std::copy_n(v.values.begin() + (t * v.height + top + y) * v.width + left, side,
                  out.values.begin() + (t * side + y) * side);
  return out;
}

/// Training: random crop and horizontal flip with probability flip_prob,
/// shared by all frames of the clip. Eval: center crop, no flip.
template <class T>
VideoFrames<T> augment_video(const VideoFrames<T>& v, double flip_prob, std::size_t crop, bool training, Rng& rng) {
  if (crop > v.height || crop > v.width) throw ContractError("augment_video: crop larger than the frame");
  std::size_t top, left;
  bool flip = false;
  if (training) {
    top = rng.below(v.height - crop + 1);
    left = rng.below(v.width - crop + 1);
    flip = flip_prob > 0.0 && rng.uniform() < flip_prob;
  } else {
    top = (v.height - crop) / 2;
    left = (v.width - crop) / 2;
  }
  auto out = crop_video(v, top, left, crop);
  return flip ? hflip(out) : out;
}

}  // namespace avd2v
