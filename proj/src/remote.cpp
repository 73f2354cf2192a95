#include <httplib.h>
#include <openssl/evp.h>

#include <cmath>
#include <nlohmann/json.hpp>
#include <unordered_map>

#include "triage/inference.hpp"

namespace triage {

using nlohmann::json;

std::string base64_encode(std::string_view bytes) {
  std::string out(4 * ((bytes.size() + 2) / 3), '\0');
  const int n = EVP_EncodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(bytes.data()),
                                static_cast<int>(bytes.size()));
  out.resize(static_cast<std::size_t>(n));
  return out;
}

std::string base64_decode(std::string_view text) {
  if (text.size() % 4 != 0) throw InputError("base64 length not a multiple of 4");
  std::string out(3 * text.size() / 4, '\0');
  const int n = EVP_DecodeBlock(reinterpret_cast<unsigned char*>(out.data()),
                                reinterpret_cast<const unsigned char*>(text.data()),
                                static_cast<int>(text.size()));
  if (n < 0) throw InputError("invalid base64");
  std::size_t len = static_cast<std::size_t>(n);
  // EVP_DecodeBlock keeps the zero bytes that stand in for '=' padding.
  if (!text.empty() && text.back() == '=') --len;
  if (text.size() >= 2 && text[text.size() - 2] == '=') --len;
  out.resize(len);
  return out;
}

RemoteModelClient::RemoteModelClient(RemoteModelConfig cfg)
    : cfg_(std::move(cfg)), limiter_(std::make_unique<InFlightLimiter>(cfg_.max_in_flight)) {
  if (cfg_.max_batch == 0) throw ConfigError("remote max_batch must be positive");
  if (cfg_.model != "relevance" && cfg_.model != "damage" && cfg_.model != "features")
    throw ConfigError("remote model must be relevance, damage or features");
}

namespace {

bool valid_label(const std::string& model, const std::string& label) {
  if (model == "relevance") return parse_relevance(label).has_value();
  if (model == "damage") return parse_damage(label).has_value();
  return true;
}

}  // namespace

std::vector<RemoteItemResult> RemoteModelClient::classify(std::span<const RemoteItem> batch) {
  if (batch.size() > cfg_.max_batch)
    throw ContractViolation("remote batch of " + std::to_string(batch.size()) +
                            " exceeds max_batch " + std::to_string(cfg_.max_batch));
  if (batch.empty()) return {};

  json req{{"model", cfg_.model}, {"items", json::array()}};
  for (const auto& item : batch) {
    json j{{"image_id", item.image_id}};
    if (cfg_.send_features && item.feature)
      j["feature"] = *item.feature;
    else
      j["bytes_b64"] = base64_encode(item.bytes);
    req["items"].push_back(std::move(j));
  }
  const std::string body = req.dump();

  std::string response_body;
  std::string last_error;
  bool ok = false;
  {
    InFlightLimiter::Guard guard(*limiter_);
    for (int attempt = 0; attempt < 2 && !ok; ++attempt) {
      httplib::Client client(cfg_.base_url);
      client.set_connection_timeout(cfg_.timeout);
      client.set_read_timeout(cfg_.timeout);
      client.set_write_timeout(cfg_.timeout);
      auto res = client.Post(cfg_.path, body, "application/json");
      if (!res) {
        last_error = httplib::to_string(res.error());
      } else if (res->status < 200 || res->status >= 300) {
        last_error = "HTTP " + std::to_string(res->status);
      } else {
        response_body = std::move(res->body);
        ok = true;
      }
    }
  }
  if (!ok) throw StageError(cfg_.model, "remote model request failed: " + last_error);

  json resp = json::parse(response_body, nullptr, false);
  if (!resp.is_object() || !resp.contains("items") || !resp["items"].is_array())
    throw StageError(cfg_.model, "remote model returned a malformed response");

  std::unordered_map<std::string, const json*> by_id;
  for (const auto& it : resp["items"]) {
    if (it.is_object() && it.contains("image_id") && it["image_id"].is_string())
      by_id.emplace(it["image_id"].get<std::string>(), &it);
  }

  std::vector<RemoteItemResult> out;
  out.reserve(batch.size());
  for (const auto& item : batch) {
    auto found = by_id.find(item.image_id);
    if (found == by_id.end()) {
      out.emplace_back(RemoteItemError{item.image_id, RemoteItemError::Kind::Missing,
                                       "no result for item"});
      continue;
    }
    const json& r = *found->second;
    if (r.contains("error")) {
      out.emplace_back(RemoteItemError{item.image_id, RemoteItemError::Kind::ModelError,
                                       r["error"].is_string() ? r["error"].get<std::string>()
                                                              : r["error"].dump()});
      continue;
    }
    RemotePrediction p;
    p.image_id = item.image_id;
    if (cfg_.model == "features") {
      if (!r.contains("feature") || !r["feature"].is_array()) {
        out.emplace_back(RemoteItemError{item.image_id, RemoteItemError::Kind::ContractViolation,
                                         "missing feature array"});
        continue;
      }
      bool numeric = true;
      for (const auto& x : r["feature"]) {
        if (!x.is_number()) numeric = false;
        else p.feature.push_back(x.get<double>());
      }
      if (!numeric) {
        out.emplace_back(RemoteItemError{item.image_id, RemoteItemError::Kind::ContractViolation,
                                         "non-numeric feature entry"});
        continue;
      }
      p.confidence = 1.0;
      out.emplace_back(std::move(p));
      continue;
    }
    if (!r.contains("label") || !r["label"].is_string() || !r.contains("confidence") ||
        !r["confidence"].is_number()) {
      out.emplace_back(RemoteItemError{item.image_id, RemoteItemError::Kind::ContractViolation,
                                       "label and confidence required"});
      continue;
    }
    p.label = r["label"].get<std::string>();
    p.confidence = r["confidence"].get<double>();
    if (!valid_label(cfg_.model, p.label)) {
      out.emplace_back(RemoteItemError{item.image_id, RemoteItemError::Kind::ContractViolation,
                                       "unknown label '" + p.label + "'"});
      continue;
    }
    if (!(p.confidence >= 0.0 && p.confidence <= 1.0)) {
      out.emplace_back(RemoteItemError{item.image_id, RemoteItemError::Kind::ContractViolation,
                                       "confidence out of [0,1]"});
      continue;
    }
    out.emplace_back(std::move(p));
  }
  return out;
}

std::vector<RemoteItemResult> remote_classify(std::span<const RemoteItem> batch,
                                              const RemoteModelConfig& endpoint) {
  RemoteModelClient client(endpoint);
  return client.classify(batch);
}

namespace {

RemotePrediction single(RemoteModelClient& client, const ImageRecord& image) {
  RemoteItem item{image.image_id, image.bytes, std::nullopt};
  auto results = client.classify(std::span<const RemoteItem>(&item, 1));
  if (auto* err = std::get_if<RemoteItemError>(&results.front()))
    throw StageError(client.config().model, err->message);
  return std::get<RemotePrediction>(std::move(results.front()));
}

}  // namespace

RemoteAdapter::RemoteAdapter(RemoteModelConfig relevance, RemoteModelConfig damage)
    : relevance_(std::move(relevance)), damage_(std::move(damage)) {}

Prediction<RelevanceLabel> RemoteAdapter::classify_relevance(const ImageRecord& image) {
  auto r = single(relevance_, image);
  return {image.image_id, *parse_relevance(r.label), r.confidence,
          "remote-" + relevance_.config().model, now_ms()};
}

Prediction<DamageLabel> RemoteAdapter::classify_damage(const ImageRecord& image) {
  auto r = single(damage_, image);
  return {image.image_id, *parse_damage(r.label), r.confidence,
          "remote-" + damage_.config().model, now_ms()};
}

RemoteExtractor::RemoteExtractor(RemoteModelConfig cfg) : client_(std::move(cfg)) {}

std::vector<double> RemoteExtractor::extract(const ImageRecord& image) {
  return single(client_, image).feature;
}

}  // namespace triage
