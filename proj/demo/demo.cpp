// Trains small models on the synthetic dataset and explains a few rows the
// classifier rejects. Usage: tdce_demo [epochs]

#include <cstdlib>
#include <iostream>

#include "tdce/tdce.hpp"

int main(int argc, char** argv) {
    using namespace tdce;
    const int epochs = argc > 1 ? std::atoi(argv[1]) : 60;

    const auto table = data::make_synthetic(7, 2000);
    const auto sp = data::split(table.rows.size(), {0.7, 0.1, 0.2}, 1);
    const auto schema = data::fit_schema(data::select_rows(table, sp.train), data::synthetic_manifest());
    const auto train = data::encode(schema, data::to_dataset(schema, data::select_rows(table, sp.train)));
    const auto val = data::encode(schema, data::to_dataset(schema, data::select_rows(table, sp.val)));
    const auto test = data::to_dataset(schema, data::select_rows(table, sp.test));

    guidance::ClassifierTrainConfig ccfg;
    ccfg.seed = 2;
    const auto clf = guidance::train_classifier(train, val, ccfg);
    std::cout << "classifier validation accuracy " << clf.validation_accuracy << '\n';

    diffusion::DiffusionTrainConfig dcfg;
    dcfg.epochs = epochs;
    dcfg.seed = 3;
    const auto dres = diffusion::train_diffusion(train.features, schema.layout(), diffusion::build_schedule(diffusion::kDefaultSteps), dcfg);
    std::cout << "denoiser loss " << dres.epoch_loss.front() << " -> " << dres.epoch_loss.back() << "\n\n";

    guidance::GuidanceConfig g;  // target 1, schema-default immutable columns
    int shown = 0;
    for (std::size_t i = 0; i < test.rows.size() && shown < 3; ++i) {
        const auto x = data::encode_row(schema, schema.layout(), test.rows[i]);
        if (clf.classifier.probability(x, 1) >= 0.5) continue;
        g.seed = i;
        const auto r = guidance::generate_counterfactual(test.rows[i], schema, clf.classifier, dres.denoiser, g);
        std::cout << "query " << i << ": p(y=1) " << clf.classifier.probability(x, 1) << " -> " << r.probability
                  << (r.valid ? " (valid)\n" : " (not valid)\n");
        for (const auto& d : r.deltas)
            std::cout << "  " << d.column << ": " << data::cell_text(d.from) << " -> " << data::cell_text(d.to)
                      << (d.changed ? "" : " (unchanged)") << '\n';
        ++shown;
    }
    return 0;
}
