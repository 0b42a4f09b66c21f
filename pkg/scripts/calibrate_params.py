"""Parameter budget versus width d and encoder depth: how the default d=40, stacks=3 was chosen.

Targets: about 260k parameters in total and a fine-tune fraction near 6.5%.
"""

from deepmachining.model import DeepMachining, ModelConfig, finetune_mask, insert_adapters, param_counts

SCHEDULES = {2: (11, 7, 3), 3: (11, 7, 5, 3), 4: (11, 7, 5, 3, 3)}


def main():
    print(f"{'d':>4} {'stacks':>6} {'total':>8} {'ft total':>9} {'trainable':>9} {'fraction':>8}")
    for stacks, schedule in SCHEDULES.items():
        for d in (32, 40, 48, 56):
            cfg = ModelConfig(d=d, stacks=stacks, kernel_schedule=schedule)
            params = DeepMachining(cfg).params
            total = param_counts(params)[0]
            ft = insert_adapters(params, cfg)
            ft_total, trainable, frac = param_counts(ft, finetune_mask(ft))
            mark = "  <- default" if cfg == ModelConfig() else ""
            print(f"{d:>4} {stacks:>6} {total:>8} {ft_total:>9} {trainable:>9} {frac:>8.4f}{mark}")


if __name__ == "__main__":
    main()
