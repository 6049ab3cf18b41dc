#include "mhc/corpus.hpp"

#include <unicode/uchar.h>
#include <unicode/utf8.h>

#include <algorithm>
#include <bit>
#include <climits>
#include <cstring>
#include <fstream>
#include <json.hpp>
#include <numeric>
#include <sstream>

namespace mhc {
namespace {

static_assert(std::endian::native == std::endian::little, "token cache assumes little endian");

constexpr std::string_view kEndOfText = "<|endoftext|>";

enum class CharClass { space, letter, number, other };

CharClass classify(UChar32 c) {
  if (c < 0) return CharClass::other;  // invalid UTF-8 byte
  if (u_isUWhiteSpace(c)) return CharClass::space;
  const auto mask = U_GET_GC_MASK(c);
  if (mask & U_GC_L_MASK) return CharClass::letter;
  if (mask & U_GC_N_MASK) return CharClass::number;
  return CharClass::other;
}

struct CodePoint {
  std::size_t begin, end;
  CharClass cls;
  UChar32 c;
};

std::vector<CodePoint> code_points(std::string_view text) {
  std::vector<CodePoint> out;
  out.reserve(text.size());
  const auto* s = reinterpret_cast<const std::uint8_t*>(text.data());
  const auto len = static_cast<std::int32_t>(text.size());
  std::int32_t i = 0;
  while (i < len) {
    const std::int32_t start = i;
    UChar32 c;
    U8_NEXT(s, i, len, c);
    out.push_back({static_cast<std::size_t>(start), static_cast<std::size_t>(i), classify(c), c});
  }
  return out;
}

std::string utf8(char32_t c) {
  std::string s;
  if (c < 0x80) {
    s += static_cast<char>(c);
  } else if (c < 0x800) {
    s += static_cast<char>(0xC0 | (c >> 6));
    s += static_cast<char>(0x80 | (c & 0x3F));
  } else {
    s += static_cast<char>(0xE0 | (c >> 12));
    s += static_cast<char>(0x80 | ((c >> 6) & 0x3F));
    s += static_cast<char>(0x80 | (c & 0x3F));
  }
  return s;
}

void put_u32(std::string& out, std::uint32_t v) { out.append(reinterpret_cast<const char*>(&v), 4); }
void put_u64(std::string& out, std::uint64_t v) { out.append(reinterpret_cast<const char*>(&v), 8); }

}  // namespace

const std::vector<char32_t>& byte_to_unicode_table() {
  static const std::vector<char32_t> table = [] {
    std::vector<char32_t> t(256, 0);
    std::vector<bool> printable(256, false);
    for (int b = '!'; b <= '~'; ++b) printable[b] = true;
    for (int b = 0xA1; b <= 0xAC; ++b) printable[b] = true;
    for (int b = 0xAE; b <= 0xFF; ++b) printable[b] = true;
    char32_t next = 256;
    for (int b = 0; b < 256; ++b) t[b] = printable[b] ? static_cast<char32_t>(b) : next++;
    return t;
  }();
  return table;
}

// 's|'t|'re|'ve|'m|'ll|'d| ?\p{L}+| ?\p{N}+| ?[^\s\p{L}\p{N}]+|\s+(?!\S)|\s+
std::vector<std::string_view> pretokenize(std::string_view text) {
  const auto cps = code_points(text);
  std::vector<std::string_view> out;
  const std::size_t n = cps.size();
  auto emit = [&](std::size_t a, std::size_t b) {
    out.push_back(text.substr(cps[a].begin, cps[b - 1].end - cps[a].begin));
  };
  auto run = [&](std::size_t from, CharClass cls) {
    while (from < n && cps[from].cls == cls) ++from;
    return from;
  };
  std::size_t i = 0;
  while (i < n) {
    const auto& cp = cps[i];
    if (cp.c == '\'' && i + 1 < n) {
      const UChar32 a = cps[i + 1].c;
      const UChar32 b = i + 2 < n ? cps[i + 2].c : 0;
      std::size_t len = 0;
      if (a == 's' || a == 't' || a == 'm' || a == 'd') len = 2;
      else if ((a == 'r' && b == 'e') || (a == 'v' && b == 'e') || (a == 'l' && b == 'l')) len = 3;
      if (len) {
        emit(i, i + len);
        i += len;
        continue;
      }
    }
    std::size_t start = i;
    CharClass cls = cp.cls;
    if (cp.c == ' ' && i + 1 < n && cps[i + 1].cls != CharClass::space) {
      cls = cps[i + 1].cls;
      ++i;
    }
    if (cls != CharClass::space) {
      const std::size_t end = run(i, cls);
      emit(start, end);
      i = end;
      continue;
    }
    const std::size_t end = run(i, CharClass::space);
    if (end == n || end - i == 1) {
      emit(i, end);
      i = end;
    } else {
      emit(i, end - 1);  // leave one space to prefix the next word
      i = end - 1;
    }
  }
  return out;
}

struct Tokenizer::Bpe {
  std::unordered_map<std::string, TokenId> vocab;
  std::vector<std::string> id_to_token;
  std::unordered_map<std::string, std::size_t> ranks;  // "a b" -> priority
  std::vector<std::string> byte_symbol;                // surrogate UTF-8 per byte
  std::unordered_map<char32_t, std::uint8_t> unicode_to_byte;
  TokenId eos = -1;

  mutable std::mutex cache_mutex;
  mutable std::unordered_map<std::string, std::vector<TokenId>> cache;

  std::vector<TokenId> encode_word(std::string_view word) const {
    {
      std::lock_guard lock(cache_mutex);
      auto it = cache.find(std::string(word));
      if (it != cache.end()) return it->second;
    }
    std::vector<std::string> parts;
    parts.reserve(word.size());
    for (unsigned char b : word) parts.push_back(byte_symbol[b]);
    std::string key;
    while (parts.size() > 1) {
      std::size_t best = SIZE_MAX;
      for (std::size_t j = 0; j + 1 < parts.size(); ++j) {
        key.assign(parts[j]).append(" ").append(parts[j + 1]);
        auto it = ranks.find(key);
        if (it != ranks.end()) best = std::min(best, it->second);
      }
      if (best == SIZE_MAX) break;
      std::vector<std::string> merged;
      merged.reserve(parts.size());
      for (std::size_t j = 0; j < parts.size();) {
        if (j + 1 < parts.size()) {
          key.assign(parts[j]).append(" ").append(parts[j + 1]);
          auto it = ranks.find(key);
          if (it != ranks.end() && it->second == best) {
            merged.push_back(parts[j] + parts[j + 1]);
            j += 2;
            continue;
          }
        }
        merged.push_back(std::move(parts[j]));
        ++j;
      }
      parts = std::move(merged);
    }
    std::vector<TokenId> ids;
    ids.reserve(parts.size());
    for (const auto& p : parts) {
      auto it = vocab.find(p);
      MHC_CHECK(it != vocab.end(), DataError, "bpe: merged symbol '" + p + "' missing from vocabulary");
      ids.push_back(it->second);
    }
    std::lock_guard lock(cache_mutex);
    if (cache.size() > 200000) cache.clear();
    cache.emplace(std::string(word), ids);
    return ids;
  }
};

Tokenizer Tokenizer::byte_fallback() { return Tokenizer{}; }

Tokenizer Tokenizer::from_strings(std::string_view vocab_json, std::string_view merges_text) {
  auto bpe = std::make_shared<Bpe>();
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(vocab_json);
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("vocab: invalid JSON: ") + e.what());
  }
  MHC_CHECK(j.is_object() && !j.empty(), DataError, "vocab: expected a non-empty JSON object");
  std::size_t max_id = 0;
  for (auto it = j.begin(); it != j.end(); ++it) {
    MHC_CHECK(it.value().is_number_integer(), DataError, "vocab: id for '" + it.key() + "' is not an integer");
    const auto id = it.value().get<std::int64_t>();
    MHC_CHECK(id >= 0 && id < INT32_MAX, DataError, "vocab: id out of range for '" + it.key() + "'");
    bpe->vocab.emplace(it.key(), static_cast<TokenId>(id));
    max_id = std::max<std::size_t>(max_id, static_cast<std::size_t>(id));
  }
  bpe->id_to_token.assign(max_id + 1, {});
  std::vector<bool> used(max_id + 1, false);
  for (const auto& [tok, id] : bpe->vocab) {
    MHC_CHECK(!used[id], DataError, "vocab: duplicate id " + std::to_string(id));
    used[id] = true;
    bpe->id_to_token[id] = tok;
  }
  MHC_CHECK(std::all_of(used.begin(), used.end(), [](bool b) { return b; }), DataError,
            "vocab: ids are not contiguous from 0");

  const auto& table = byte_to_unicode_table();
  bpe->byte_symbol.resize(256);
  for (int b = 0; b < 256; ++b) {
    bpe->byte_symbol[b] = utf8(table[b]);
    bpe->unicode_to_byte[table[b]] = static_cast<std::uint8_t>(b);
    MHC_CHECK(bpe->vocab.count(bpe->byte_symbol[b]), DataError,
              "vocab: missing byte symbol for byte " + std::to_string(b));
  }

  std::istringstream in{std::string(merges_text)};
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty() || (line_no == 1 && line.rfind("#version", 0) == 0)) continue;
    const auto sp = line.find(' ');
    MHC_CHECK(sp != std::string::npos && sp > 0 && sp + 1 < line.size() &&
                  line.find(' ', sp + 1) == std::string::npos,
              DataError, "merges: line " + std::to_string(line_no) + " is not a token pair");
    const std::string a = line.substr(0, sp), b = line.substr(sp + 1);
    MHC_CHECK(bpe->vocab.count(a) && bpe->vocab.count(b) && bpe->vocab.count(a + b), DataError,
              "merges: line " + std::to_string(line_no) + " references tokens outside the vocabulary");
    bpe->ranks.emplace(line, bpe->ranks.size());
  }

  auto eos = bpe->vocab.find(std::string(kEndOfText));
  Tokenizer t;
  t.vocab_size_ = bpe->id_to_token.size();
  t.eos_ = eos != bpe->vocab.end() ? eos->second : static_cast<TokenId>(t.vocab_size_ - 1);
  t.pad_ = t.eos_;
  bpe->eos = eos != bpe->vocab.end() ? eos->second : -1;
  t.bpe_ = std::move(bpe);
  return t;
}

Tokenizer Tokenizer::load_bpe(const std::filesystem::path& vocab_file,
                              const std::filesystem::path& merges_file) {
  return from_strings(read_text_file(vocab_file), read_text_file(merges_file));
}

std::vector<TokenId> Tokenizer::encode(std::string_view text) const {
  std::vector<TokenId> ids;
  if (!bpe_) {
    ids.reserve(text.size());
    for (unsigned char b : text) ids.push_back(b);
    return ids;
  }
  while (!text.empty()) {
    std::size_t cut = bpe_->eos >= 0 ? text.find(kEndOfText) : std::string_view::npos;
    const auto chunk = text.substr(0, cut);
    for (auto word : pretokenize(chunk)) {
      auto w = bpe_->encode_word(word);
      ids.insert(ids.end(), w.begin(), w.end());
    }
    if (cut == std::string_view::npos) break;
    ids.push_back(bpe_->eos);
    text.remove_prefix(cut + kEndOfText.size());
  }
  return ids;
}

std::string Tokenizer::decode(std::span<const TokenId> ids) const {
  std::string out;
  for (TokenId id : ids) {
    MHC_CHECK(id >= 0 && static_cast<std::size_t>(id) < vocab_size_, DataError,
              "decode: id " + std::to_string(id) + " outside vocabulary");
    if (!bpe_) {
      if (id < 256) out += static_cast<char>(id);
      continue;
    }
    const auto& tok = bpe_->id_to_token[id];
    if (id == bpe_->eos) {
      out += tok;
      continue;
    }
    const auto* s = reinterpret_cast<const std::uint8_t*>(tok.data());
    const auto len = static_cast<std::int32_t>(tok.size());
    std::int32_t i = 0;
    while (i < len) {
      UChar32 c;
      U8_NEXT(s, i, len, c);
      auto it = bpe_->unicode_to_byte.find(static_cast<char32_t>(c));
      MHC_CHECK(c >= 0 && it != bpe_->unicode_to_byte.end(), DataError,
                "decode: token " + std::to_string(id) + " is not byte-level");
      out += static_cast<char>(it->second);
    }
  }
  return out;
}

PackedDataset::PackedDataset(std::vector<TokenId> tokens, std::size_t seq_len)
    : tokens_(std::move(tokens)), seq_len_(seq_len) {
  MHC_CHECK(seq_len >= 1, ConfigError, "pack: sequence length must be at least 1");
  MHC_CHECK(tokens_.size() >= seq_len + 1, DataError,
            "corpus too small: " + std::to_string(tokens_.size()) + " tokens for sequence length " +
                std::to_string(seq_len));
  samples_ = (tokens_.size() - 1) / seq_len;
}

std::span<const TokenId> PackedDataset::input(std::size_t i) const {
  MHC_CHECK(i < samples_, ShapeError, "sample index out of range");
  return std::span<const TokenId>(tokens_).subspan(i * seq_len_, seq_len_);
}

std::span<const TokenId> PackedDataset::target(std::size_t i) const {
  MHC_CHECK(i < samples_, ShapeError, "sample index out of range");
  return std::span<const TokenId>(tokens_).subspan(i * seq_len_ + 1, seq_len_);
}

PackedDataset pack(std::vector<TokenId> tokens, std::size_t seq_len) {
  return PackedDataset(std::move(tokens), seq_len);
}

BatchPlan::BatchPlan(const PackedDataset& ds, std::size_t batch, BatchMode mode, bool shuffle,
                     std::uint64_t seed)
    : ds_(&ds), batch_(batch) {
  MHC_CHECK(batch >= 1, ConfigError, "batch size must be at least 1");
  MHC_CHECK(ds.samples() > 0, DataError, "empty dataset");
  order_.resize(ds.samples());
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  if (shuffle) {
    Rng rng(seed);
    std::shuffle(order_.begin(), order_.end(), rng);
  }
  count_ = mode == BatchMode::train ? order_.size() / batch : (order_.size() + batch - 1) / batch;
}

Batch BatchPlan::operator[](std::size_t i) const {
  MHC_CHECK(i < count_, ShapeError, "batch index out of range");
  const std::size_t first = i * batch_;
  const std::size_t last = std::min(first + batch_, order_.size());
  Batch b;
  b.batch = last - first;
  b.time = ds_->seq_len();
  b.x.reserve(b.tokens());
  b.y.reserve(b.tokens());
  for (std::size_t k = first; k < last; ++k) {
    auto in = ds_->input(order_[k]);
    auto tg = ds_->target(order_[k]);
    b.x.insert(b.x.end(), in.begin(), in.end());
    b.y.insert(b.y.end(), tg.begin(), tg.end());
  }
  return b;
}

void save_token_cache(const std::filesystem::path& path, std::span<const TokenId> ids,
                      std::size_t vocab) {
  std::string out;
  out.reserve(16 + 4 * ids.size());
  put_u32(out, kTokenCacheVersion);
  put_u32(out, static_cast<std::uint32_t>(vocab));
  put_u64(out, ids.size());
  for (TokenId id : ids) put_u32(out, static_cast<std::uint32_t>(id));
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  const auto tmp = std::filesystem::path(path.string() + ".tmp");
  {
    std::ofstream f(tmp, std::ios::binary);
    MHC_CHECK(f.good(), DataError, "cannot write token cache " + tmp.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    MHC_CHECK(f.good(), DataError, "failed writing token cache " + tmp.string());
  }
  std::filesystem::rename(tmp, path);
}

std::vector<TokenId> load_token_cache(const std::filesystem::path& path, std::size_t vocab) {
  const std::string bytes = read_text_file(path);
  MHC_CHECK(bytes.size() >= 16, DataError, "token cache truncated: " + path.string());
  std::uint32_t version, v;
  std::uint64_t count;
  std::memcpy(&version, bytes.data(), 4);
  std::memcpy(&v, bytes.data() + 4, 4);
  std::memcpy(&count, bytes.data() + 8, 8);
  MHC_CHECK(version == kTokenCacheVersion, DataError,
            "token cache version " + std::to_string(version) + " unsupported");
  MHC_CHECK(v == vocab, DataError,
            "token cache vocabulary " + std::to_string(v) + " != tokenizer " + std::to_string(vocab));
  MHC_CHECK(bytes.size() == 16 + 4 * count, DataError, "token cache length mismatch: " + path.string());
  std::vector<TokenId> ids(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint32_t id;
    std::memcpy(&id, bytes.data() + 16 + 4 * i, 4);
    MHC_CHECK(id < vocab, DataError, "token cache id out of range");
    ids[i] = static_cast<TokenId>(id);
  }
  return ids;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  MHC_CHECK(f.good(), DataError, "cannot read " + path.string());
  std::ostringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<TokenId> tokenize_file(const Tokenizer& tok, const std::filesystem::path& text,
                                   const std::filesystem::path& cache) {
  if (!cache.empty() && std::filesystem::exists(cache)) return load_token_cache(cache, tok.vocab_size());
  auto ids = tok.encode(read_text_file(text));
  if (!cache.empty()) save_token_cache(cache, ids, tok.vocab_size());
  return ids;
}

std::string synthetic_corpus(std::size_t bytes, std::uint64_t seed) {
  static const std::vector<std::string> subjects{"the cat", "a dog", "the old man", "my sister",
                                                 "the farmer", "a small bird", "the teacher",
                                                 "our neighbour", "the river", "a young girl"};
  static const std::vector<std::string> verbs{"sees", "likes", "follows", "finds", "watches",
                                              "carries", "remembers", "paints", "visits", "hears"};
  static const std::vector<std::string> objects{"the red house", "a green field", "the long road",
                                                "an empty boat", "the tall tree", "a quiet town",
                                                "the cold sea", "a bright star", "the old bridge",
                                                "a wooden box"};
  static const std::vector<std::string> tails{"in the morning", "after the rain", "near the hill",
                                              "every day", "at night", "with great care",
                                              "before dinner", "on sunday"};
  Rng rng(seed);
  auto pick = [&](const std::vector<std::string>& v) -> const std::string& {
    return v[std::uniform_int_distribution<std::size_t>(0, v.size() - 1)(rng)];
  };
  std::string out;
  out.reserve(bytes + 128);
  std::size_t in_paragraph = 0;
  while (out.size() < bytes) {
    std::string s = pick(subjects) + " " + pick(verbs) + " " + pick(objects);
    if (std::uniform_int_distribution<int>(0, 1)(rng)) s += " " + pick(tails);
    s[0] = static_cast<char>(s[0] - 'a' + 'A');
    out += s + ". ";
    if (++in_paragraph == 6) {
      out.back() = '\n';
      in_paragraph = 0;
    }
  }
  out.resize(bytes);
  return out;
}

}  // namespace mhc
