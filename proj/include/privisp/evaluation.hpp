#pragma once

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "privisp/detection.hpp"
#include "privisp/face.hpp"
#include "privisp/tensor.hpp"

namespace privisp::eval {

using ImageFn = std::function<Tensor(const Tensor&)>;

inline constexpr double kPsnrCap = 100.0;

struct IQAReport {
  double rmse = 0, psnr = 0, ssim = 0, ms_ssim = 0;
};

/// RMSE and PSNR pool the squared error over the whole batch; SSIM and
/// MS-SSIM are per-image means over channels, averaged over the batch.
IQAReport iqa(const Tensor& test, const Tensor& reference);
double psnr_from_mse(double mse);
/// PSNR restricted to pixels where mask [N,1,H,W] is 1.
double masked_psnr(const Tensor& test, const Tensor& reference, const Tensor& mask);
double ssim(const Tensor& test, const Tensor& reference);
double ms_ssim(const Tensor& test, const Tensor& reference);

/// Box-filter downsample by `factor`, then bilinear (half-pixel centres) back up.
Tensor low_resolution(const Tensor& img, int factor);
/// Per-channel Gaussian blur with reflect-101 borders.
Tensor defocus(const Tensor& img, int kernel_size, double sigma);
/// Normalised 1-D Gaussian taps.
std::vector<double> gaussian_kernel(int size, double sigma);
/// x -> 1 - x.
Tensor invert_colors(const Tensor& img);

struct InversionReport {
  double mean_similarity = 0;
  double same_identity_rate = 0;  ///< fraction of pairs with similarity above the threshold
  double miss_rate = 0;           ///< raw detections with no inverted counterpart
  int pairs = 0;
  int raw_detections = 0;
};

inline constexpr double kVerificationThreshold = 0.409;

/// Compares faces with their colour-inverted versions and counts person
/// detections lost under inversion (confidence > 0.5, IoU >= 0.5 matching).
InversionReport preliminary_inversion_analysis(const Tensor& faces, face::FeatureExtractor& extractor,
                                               det::DetectorModel& detector,
                                               const std::vector<det::DetectionSample>& scenes,
                                               double threshold = kVerificationThreshold);

struct SweepConfig {
  std::string method;
  std::string parameter;
  ImageFn transform;  ///< applied to face queries and to detection images
};

struct SweepPoint {
  std::string method;
  std::string parameter;
  double privacy = 0;  ///< mean identification accuracy (lower is better)
  double utility = 0;  ///< detection AP (higher is better)
  bool dominated = false;
};

struct SweepContext {
  const face::FaceDataset* faces = nullptr;
  face::FeatureExtractor* extractor = nullptr;
  det::DetectorModel* detector = nullptr;
  const std::vector<det::DetectionSample>* scenes = nullptr;
  int runs = 10;
  std::uint64_t seed = 0;
};

/// True when a is no worse on both axes and strictly better on one.
bool dominates(const SweepPoint& a, const SweepPoint& b);
void mark_dominated(std::vector<SweepPoint>& points);

std::vector<SweepPoint> tradeoff_sweep(const std::vector<SweepConfig>& configs, const SweepContext& ctx);
void write_sweep_csv(const std::vector<SweepPoint>& points, const std::filesystem::path& path);
/// Scatter plot, accuracy on x and AP on y.
void write_sweep_svg(const std::vector<SweepPoint>& points, const std::filesystem::path& path);

/// CSV rows: image id, identity, feature components.
void export_features(face::FeatureExtractor& extractor, const face::FaceDataset& data,
                     const std::filesystem::path& destination);

struct FeatureTable {
  std::vector<std::string> ids;
  std::vector<int> identities;
  std::vector<std::vector<double>> features;
};
FeatureTable read_features(const std::filesystem::path& source);

}  // namespace privisp::eval
