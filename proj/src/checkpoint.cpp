#include "vseg/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <map>

#include "vseg/common.hpp"

namespace vseg::ckpt {

namespace {

constexpr char kMagic[8] = {'V', 'S', 'E', 'G', 'B', 'L', 'B', '1'};

template <typename T>
constexpr uint8_t dtype_tag() {
  return sizeof(T) == 4 ? 0 : 1;
}

template <typename T>
void write_entry(std::ofstream& f, const std::string& name, const Tensor<T>& t) {
  const uint32_t nlen = uint32_t(name.size());
  f.write(reinterpret_cast<const char*>(&nlen), 4);
  f.write(name.data(), nlen);
  const uint8_t dt = dtype_tag<T>();
  f.put(char(dt));
  const uint32_t rank = uint32_t(t.rank());
  f.write(reinterpret_cast<const char*>(&rank), 4);
  for (int i = 0; i < t.rank(); ++i) {
    const int64_t d = t.dim(i);
    f.write(reinterpret_cast<const char*>(&d), 8);
  }
  f.write(reinterpret_cast<const char*>(t.data()), std::streamsize(size_t(t.size()) * sizeof(T)));
}

template <typename T>
std::pair<std::string, Tensor<T>> read_entry(std::ifstream& f) {
  uint32_t nlen = 0;
  f.read(reinterpret_cast<char*>(&nlen), 4);
  std::string name(nlen, '\0');
  f.read(name.data(), nlen);
  uint8_t dt = uint8_t(f.get());
  check_runtime(dt == dtype_tag<T>(), "checkpoint: dtype mismatch for " + name);
  uint32_t rank = 0;
  f.read(reinterpret_cast<char*>(&rank), 4);
  std::vector<int64_t> dims(rank);
  for (auto& d : dims) f.read(reinterpret_cast<char*>(&d), 8);
  Tensor<T> t(dims);
  f.read(reinterpret_cast<char*>(t.data()), std::streamsize(size_t(t.size()) * sizeof(T)));
  check_runtime(f.good(), "checkpoint: truncated entry " + name);
  return {std::move(name), std::move(t)};
}

}  // namespace

template <typename T>
void save_params(const std::filesystem::path& file, const nn::ParamSet<T>& params,
                 const nn::Adam<T>* adam) {
  std::ofstream f(file, std::ios::binary);
  check_runtime(f.good(), "checkpoint: cannot open " + file.string());
  f.write(kMagic, 8);
  const auto all = params.all();
  uint64_t count = all.size();
  if (adam) count += 2 * adam->params().size() + 1;
  f.write(reinterpret_cast<const char*>(&count), 8);
  for (const auto* p : all) write_entry(f, p->name, p->value);
  if (adam) {
    auto& a = *const_cast<nn::Adam<T>*>(adam);
    for (size_t i = 0; i < adam->params().size(); ++i) {
      write_entry(f, adam->params()[i]->name + ".adam_m", a.slot_m(i));
      write_entry(f, adam->params()[i]->name + ".adam_v", a.slot_v(i));
    }
    Tensor<T> t({1});
    t[0] = T(adam->iterations());
    write_entry(f, "__optimizer_steps", t);
  }
  check_runtime(f.good(), "checkpoint: write failed " + file.string());
}

template <typename T>
void load_params(const std::filesystem::path& file, nn::ParamSet<T>& params, nn::Adam<T>* adam) {
  std::ifstream f(file, std::ios::binary);
  check_runtime(f.good(), "checkpoint: cannot open " + file.string());
  char magic[8];
  f.read(magic, 8);
  check_runtime(std::memcmp(magic, kMagic, 8) == 0, "checkpoint: bad magic in " + file.string());
  uint64_t count = 0;
  f.read(reinterpret_cast<char*>(&count), 8);
  std::map<std::string, Tensor<T>> extra;
  for (uint64_t i = 0; i < count; ++i) {
    auto [name, tensor] = read_entry<T>(f);
    if (auto* p = params.find(name)) {
      check_runtime(p->value.same_shape(tensor),
                    "checkpoint: shape mismatch for parameter " + name);
      p->value = std::move(tensor);
    } else {
      extra.emplace(std::move(name), std::move(tensor));
    }
  }
  if (adam) {
    for (size_t i = 0; i < adam->params().size(); ++i) {
      const std::string base = adam->params()[i]->name;
      auto im = extra.find(base + ".adam_m");
      auto iv = extra.find(base + ".adam_v");
      check_runtime(im != extra.end() && iv != extra.end(),
                    "checkpoint: missing optimizer state for " + base);
      adam->slot_m(i) = std::move(im->second);
      adam->slot_v(i) = std::move(iv->second);
    }
    auto it = extra.find("__optimizer_steps");
    check_runtime(it != extra.end(), "checkpoint: missing optimizer step count");
    adam->set_iterations(int64_t(it->second[0]));
  }
}

template <typename T>
uint64_t tensor_checksum(const Tensor<T>& t) {
  // FNV-1a over the raw payload.
  uint64_t h = 0xcbf29ce484222325ULL;
  const auto* bytes = reinterpret_cast<const uint8_t*>(t.data());
  for (size_t i = 0; i < size_t(t.size()) * sizeof(T); ++i) {
    h ^= bytes[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

template <typename T>
uint64_t params_checksum(const nn::ParamSet<T>& params) {
  uint64_t h = 0xcbf29ce484222325ULL;
  for (const auto* p : params.all()) {
    for (char ch : p->name) {
      h ^= uint8_t(ch);
      h *= 0x100000001b3ULL;
    }
    h ^= tensor_checksum(p->value);
    h *= 0x100000001b3ULL;
  }
  return h;
}

#define VSEG_CKPT_INSTANTIATE(T)                                                           \
  template void save_params<T>(const std::filesystem::path&, const nn::ParamSet<T>&,      \
                               const nn::Adam<T>*);                                        \
  template void load_params<T>(const std::filesystem::path&, nn::ParamSet<T>&,            \
                               nn::Adam<T>*);                                              \
  template uint64_t params_checksum<T>(const nn::ParamSet<T>&);                           \
  template uint64_t tensor_checksum<T>(const Tensor<T>&);

VSEG_CKPT_INSTANTIATE(float)
VSEG_CKPT_INSTANTIATE(double)
#undef VSEG_CKPT_INSTANTIATE

}  // namespace vseg::ckpt
