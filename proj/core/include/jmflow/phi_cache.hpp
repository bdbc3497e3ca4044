// Shared read-mostly cache of free-time potential values, keyed by the exact
// bits of the query so hits are equivalent to recomputation.
#pragma once

#include <optional>
#include <shared_mutex>
#include <string>
#include <unordered_map>

#include "jmflow/nbody.hpp"

namespace jmflow {

class PhiCache {
 public:
  struct Entry {
    double value{0.0};
    double t_star{0.0};
    double gradient_norm{0.0};
    int nodes{0};
  };

  static std::string key(const MassSystem& ms, double h, const Vec& x, const Vec& y,
                         double gtol, int nodes, double golden_rel_tol);

  std::optional<Entry> lookup(const std::string& k) const;
  void insert(const std::string& k, const Entry& e);
  std::size_t size() const;

  // One "key value t_star gradient_norm nodes" line per entry, hex-encoded key.
  void save(const std::string& path) const;
  void load(const std::string& path);

 private:
  mutable std::shared_mutex mutex_;
  std::unordered_map<std::string, Entry> map_;
};

}  // namespace jmflow
