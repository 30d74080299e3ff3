#include "lmdir/model.hpp"

#include "lmdir/checkpoint.hpp"
#include "lmdir/hash.hpp"

namespace lmdir {

Model load_model(const std::filesystem::path& checkpoint) {
  Checkpoint ck = load_checkpoint(checkpoint);
  const std::string digest = sha256_hex(read_file(checkpoint));
  return Model{std::move(ck.config), std::move(ck.params), digest.substr(0, 16)};
}

Model init_model(const net::NetworkConfig& config, std::uint64_t seed) {
  return Model{config, net::init_params<float>(config, seed), "init-" + std::to_string(seed)};
}

TensorImage restore_auto(const Model& model, const TensorImage& image, const prior::PriorBundle& bundle) {
  return net::restore(image, bundle, model.params, model.config);
}

TensorImage restore_guided(const Model& model, const TensorImage& image, const std::string& instruction,
                           const prior::PriorBundle& bundle, prior::PriorPipeline& pipeline) {
  if (instruction.empty()) throw Error(ErrorCode::InvalidArgument, "guided restoration needs an instruction");
  const prior::TextEmbedding e_d = pipeline.encode_text(instruction);
  return net::restore_with_degradation(image, e_d.tokens, bundle, model.params, model.config);
}

}  // namespace lmdir
