#include <gridmind/checkpoint.hpp>
#include <gridmind/config.hpp>

#include <json.hpp>

#include <cstdint>
#include <fstream>
#include <stdexcept>

namespace gridmind {

namespace {

constexpr char kMagic[8] = {'G', 'M', 'C', 'K', 'P', 'T', '0', '1'};

[[noreturn]] void fail(const std::string& msg) { throw std::runtime_error("checkpoint: " + msg); }

void write_u32(std::ofstream& out, uint32_t v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof v);
}

uint32_t read_u32(std::ifstream& in) {
  uint32_t v = 0;
  in.read(reinterpret_cast<char*>(&v), sizeof v);
  return v;
}

}  // namespace

void save_checkpoint(const Policy& p, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) fail("cannot write " + path);
  out.write(kMagic, sizeof kMagic);
  write_u32(out, uint32_t(p.params.size()));
  for (const auto& [name, t] : p.params) {
    write_u32(out, uint32_t(name.size()));
    out.write(name.data(), std::streamsize(name.size()));
    const std::vector<int>& shape = t.shape();
    write_u32(out, uint32_t(shape.size()));
    for (int d : shape) write_u32(out, uint32_t(d));
    out.write(reinterpret_cast<const char*>(t.values().data()),
              std::streamsize(t.size() * sizeof(double)));
  }
  if (!out) fail("write failed for " + path);

  nlohmann::json side;
  side["model"] = nlohmann::json::parse(model_config_dump(p.cfg));
  side["words"] = p.vocab.words;
  std::ofstream sout(path + ".json");
  if (!sout) fail("cannot write " + path + ".json");
  sout << side.dump(2) << "\n";
}

Policy load_checkpoint(const std::string& path, Role role) {
  std::ifstream sin(path + ".json");
  if (!sin) fail("missing sidecar " + path + ".json");
  nlohmann::json side = nlohmann::json::parse(sin);
  ModelConfig cfg = model_config_parse(side.at("model").dump());
  VocabSpec vocab = VocabSpec::build(side.at("words").get<std::vector<std::string>>(),
                                     cfg.action_bins);

  std::ifstream in(path, std::ios::binary);
  if (!in) fail("cannot read " + path);
  char magic[8];
  in.read(magic, sizeof magic);
  if (!in || std::string(magic, 8) != std::string(kMagic, 8))
    fail(path + " is not a checkpoint file");

  Policy p = Policy::init(cfg, vocab, 0);
  uint32_t n = read_u32(in);
  if (n != p.params.size())
    fail(path + " holds " + std::to_string(n) + " tensors, expected " +
         std::to_string(p.params.size()));
  for (uint32_t i = 0; i < n; ++i) {
    uint32_t len = read_u32(in);
    std::string name(len, '\0');
    in.read(name.data(), std::streamsize(len));
    Tensor& t = p.param(name);
    uint32_t ndim = read_u32(in);
    if (ndim != t.shape().size()) fail("tensor " + name + " has unexpected rank");
    size_t total = 1;
    for (uint32_t k = 0; k < ndim; ++k) {
      uint32_t d = read_u32(in);
      if (int(d) != t.shape()[k]) fail("tensor " + name + " has unexpected shape");
      total *= d;
    }
    in.read(reinterpret_cast<char*>(t.values().data()), std::streamsize(total * sizeof(double)));
    if (!in) fail("truncated tensor data in " + path);
  }
  if (role == Role::current) return p;
  return p.clone_as(role);
}

}  // namespace gridmind
